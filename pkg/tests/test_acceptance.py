"""Acceptance suite: one test per criterion, at the stated tolerances and runtime budgets.

These tests are slow (roughly half an hour in total on one core). Run them
alone with ``pytest tests/test_acceptance.py -v``.
"""

import csv
import os
import time

import numpy as np
import pytest

from meta_lab.cli import main
from meta_lab.dynamics import rhs, rhs_base, rhs_gamma, rhs_l2_noise
from meta_lab.experiments import parse_config, preset_config, run_experiment, sweep
from meta_lab.ode import IntegrationPlan, integrate
from meta_lab.order_params import ModelConfig, OrderParams, VariantConfig
from meta_lab.simulator import one_step_drift

from reference import random_state

pytestmark = pytest.mark.acceptance

JOBS = min(8, os.cpu_count() or 1)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _preset_run(name, label=None):
    """(run spec, plan) for one run of a theory preset."""
    cfg = parse_config(preset_config(name))
    runs = {r.label: r for r in cfg.resolved_runs()}
    return (runs[label] if label else runs["main"]), cfg.plan


def _integrate(run, plan):
    return integrate(run.init.resolve(run.model.K, run.model.M), run.model, run.variant, plan,
                     run.expansion)


def test_c01_integral_certification(tmp_path):
    t0 = time.perf_counter()
    code = main(["validate-integrals", "--count", "1000", "--tolerance", "1e-6", "--seed", "0",
                 "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    rows = _rows(tmp_path / "validate-integrals" / "validation.csv")
    assert code == 0
    assert all(int(r["count"]) == 1000 and float(r["max_abs_error"]) <= 1e-6 for r in rows)
    assert elapsed <= 120.0


def test_c02_fixed_points():
    variants = [VariantConfig(), VariantConfig(sigma_noise=0.01), VariantConfig(activation="linear"),
                VariantConfig(gamma=0.95)]
    rng = np.random.default_rng(0)
    states = []
    for _ in range(100):
        Q, _, T = random_state(rng, 3, 3)
        states.append(OrderParams(Q=Q, R=np.zeros((3, 3)), T=T))
    cfg = ModelConfig(eta_J=3.0, eta_w=9.0)
    worst = 0.0
    t0 = time.perf_counter()
    for v in variants:
        for p in states:
            out = rhs(p, cfg, v)
            worst = max(worst, np.max(np.abs(out.dR)), np.max(np.abs(out.dQ)))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-14
    assert elapsed <= 1.0


def test_c03_fig3_specialization_and_plateau():
    finals = {}
    for label in ("eta_w3", "eta_w9"):
        run, plan = _preset_run("fig3", label)
        t0 = time.perf_counter()
        traj = _integrate(run, plan)
        assert time.perf_counter() - t0 <= 60.0
        assert traj.completed and traj.alphas[-1] == 500.0
        finals[label] = (float(traj.eps_meta[-1]), np.abs(traj.rho[-1]))
    eps9, rho9 = finals["eta_w9"]
    assert eps9 <= 0.01
    cols = np.argmax(rho9, axis=1)
    assert len(set(cols)) == 3
    assert all(rho9[k, c] >= 0.99 for k, c in enumerate(cols))
    eps3, rho3 = finals["eta_w3"]
    assert eps3 >= 5 * eps9
    last = rho3[:, 2]
    assert np.max(last) - np.min(last) <= 0.05
    assert np.max(rho3[:, :2]) <= 0.05


def test_c04_fig2_theory_vs_simulation(tmp_path):
    t0 = time.perf_counter()
    out = run_experiment(parse_config(preset_config("fig2")), tmp_path, jobs=JOBS)
    assert time.perf_counter() - t0 <= 15 * 60
    assert out.exit_code == 0
    rows = _rows(tmp_path / "fig2" / "compare.csv")
    assert float(rows[-1]["alpha"]) == 20.0 and int(rows[0]["n_runs"]) == 10
    bad = []
    for r in rows:
        for name in r:
            if name.startswith("delta_R_") or name.startswith("delta_Q_"):
                bound = 3.0 if name.startswith("delta_R_") else 5.0
                delta, se = float(r[name]), float(r["se_" + name[6:]])
                if abs(delta) > bound * se:
                    bad.append((r["alpha"], name, delta / se))
    assert not bad, bad


def test_c05_drift_oracle():
    # large N and P keep the finite-size and decorrelation biases well below one standard error
    variants = {"base": VariantConfig(), "l2_noise": VariantConfig(lam=0.1, sigma_noise=0.01),
                "linear": VariantConfig(activation="linear"), "gamma": VariantConfig(gamma=0.95)}
    cfg = ModelConfig(N=100000, K=3, M=3, P=10000, V=100, eta_J=3.0, eta_w=4.0)
    rng = np.random.default_rng(0)
    iu = np.triu_indices(3)
    bad = []
    t0 = time.perf_counter()
    for j, (name, v) in enumerate(variants.items()):
        for i in range(20):
            Q, R, T = random_state(rng, 3, 3, 0.5)
            alpha = rng.uniform(1.0, 30.0)
            traj = integrate(OrderParams(Q=Q, R=0.3 * R, T=T), cfg, v,
                             IntegrationPlan(alpha_max=alpha, record_every=alpha))
            assert traj.completed
            state = traj.final
            d = one_step_drift(state, cfg, v, n_draws=2000, seed=100 * j + i)
            th = rhs(state, cfg, v)
            z = np.concatenate([((d.dR - th.dR) / d.dR_se).ravel(), ((d.dQ - th.dQ) / d.dQ_se)[iu]])
            if np.max(np.abs(z)) > 3.0:
                bad.append((name, i, float(np.max(np.abs(z)))))
    assert time.perf_counter() - t0 <= 20 * 60
    assert not bad, bad


def test_c06_fig4_spot_checks():
    doc = preset_config("fig4")
    doc["sweep"]["axes"]["K"] = [3, 6]
    cfg = parse_config(doc)
    t0 = time.perf_counter()
    rows = sweep(cfg, jobs=JOBS)
    assert time.perf_counter() - t0 <= 10 * 60
    assert not any(r.failure for r in rows)
    cell = {(r.K, r.eta_J, r.eta_w): r for r in rows}
    assert cell[(3, 3.0, 9.0)].alpha_tilde is not None and cell[(3, 3.0, 9.0)].alpha_tilde < 450
    assert cell[(3, 3.0, 3.0)].alpha_tilde is None
    counts = [sum(r.K == K and r.alpha_tilde is not None and r.alpha_tilde < 450 for r in rows)
              for K in (3, 6)]
    assert len(rows) == 2 * 64
    assert counts[0] <= counts[1], counts


def test_c07_fig5_overparameterized():
    run, plan = _preset_run("fig5")
    traj = _integrate(run, plan)
    assert traj.completed
    rho = np.abs(traj.rho[-1])
    assert rho.shape == (6, 3)
    assert all(np.sum(rho[:, n] >= 0.95) >= 2 for n in range(3))
    assert traj.eps_meta[-1] <= 0.01


def test_c08_linear_case_studies():
    out = {}
    for label in ("uniform", "R11", "R11_R31"):
        run, plan = _preset_run("appF", label)
        traj = _integrate(run, plan)
        assert traj.completed
        out[label] = (float(traj.eps_meta[-1]), traj.final)
    eps3, full = out["R11_R31"]
    assert eps3 <= 1e-3
    Q = full.Q
    assert np.max(np.abs(Q - np.diag(np.diag(Q)))) <= 1e-3
    assert np.ptp(np.diag(Q)) <= 1e-3
    for label, rank in (("uniform", 1), ("R11", 2)):
        eps, state = out[label]
        assert eps >= 10 * eps3
        assert np.linalg.matrix_rank(state.R, tol=1e-6) == rank


def test_c09_reductions():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(eta_J=3.0, eta_w=9.0)
    worst = 0.0
    for _ in range(100):
        Q, R, T = random_state(rng, 3, 3)
        p = OrderParams(Q=Q, R=R, T=T)
        base = rhs_base(p, cfg)
        for other in (rhs_l2_noise(p, cfg, VariantConfig(lam=0.0, sigma_noise=0.0)),
                      rhs_gamma(p, cfg, VariantConfig(gamma=1.0))):
            worst = max(worst, np.max(np.abs(other.dR - base.dR)), np.max(np.abs(other.dQ - base.dQ)))
    assert worst <= 1e-12
    Q, _, T = random_state(rng, 3, 3)
    p = OrderParams(Q=Q, R=np.zeros((3, 3)), T=T)
    lam, eta_J = 0.1, 3.0
    out = rhs_l2_noise(p, ModelConfig(eta_J=eta_J), VariantConfig(lam=lam))
    assert np.array_equal(out.dQ, -2 * lam * eta_J * p.Q)
    assert np.array_equal(out.dR, np.zeros((3, 3)))


def test_c10_self_averaging(tmp_path):
    out = run_experiment(parse_config(preset_config("appC")), tmp_path, jobs=JOBS)
    assert out.exit_code == 0
    stds = []
    for V in (20, 50, 100):
        rows = _rows(tmp_path / "appC" / f"sim_V{V}_ensemble.csv")
        last = rows[-1]
        assert float(last["alpha"]) == 20.0 and int(last["n_runs"]) == 10
        stds.append(float(last["std_Q_1_1"]))
    assert stds[0] > stds[1] > stds[2], stds
