import math

import numpy as np
import pytest

from meta_lab.dynamics import rhs
from meta_lab.order_params import ModelConfig, OrderParams, VariantConfig, meta_generalization_error
from meta_lab.rng import ROLES, stream
from meta_lab.simulator import (SimState, TaskData, empirical_meta_error, generate_task, init_sim,
                                inner_adapt, measure_order_params, one_step_drift, outer_update,
                                run_stream, state_from_order_params, train_step)

SMALL = ModelConfig(N=200, K=2, M=2, P=20, V=20, eta_J=2.0, eta_w=3.0)


def test_streams_deterministic_and_distinct():
    a = stream(5, "train", 3).standard_normal(4)
    assert np.array_equal(a, stream(5, "train", 3).standard_normal(4))
    others = [stream(5, "train", 4), stream(5, "val", 3), stream(6, "train", 3)]
    for g in others:
        assert not np.allclose(a, g.standard_normal(4))
    with pytest.raises(ValueError):
        stream(0, "bogus")
    with pytest.raises(ValueError):
        stream(-1, "u")
    assert "drift" in ROLES


def test_init_sim_shapes_and_matched():
    s = init_sim(SMALL, seed=1)
    assert s.J.shape == (2, 200) and s.B.shape == (2, 200)
    m = init_sim(SMALL, seed=1, matched=True)
    assert np.allclose(m.J @ m.J.T, 0.5 * np.eye(2), atol=1e-14)
    assert np.array_equal(m.B, s.B)


def test_state_from_order_params_exact():
    p = OrderParams(Q=np.array([[1.0, 0.2], [0.2, 0.5]]), R=np.array([[0.3, 0.1], [0.0, 0.4]]),
                    T=np.diag([1.0, 2.0]))
    s = state_from_order_params(p, 50)
    m = measure_order_params(s)
    for a, b in ((m.Q, p.Q), (m.R, p.R), (m.T, p.T)):
        assert np.allclose(a, b, atol=1e-13)


def test_inner_adapt_hand_case():
    # linear activation, one training point: w = eta_w / sqrt(K) * sigma * x
    J = np.array([[1.0, 0.0], [0.0, 2.0]])
    task = TaskData(u=np.zeros(1), train_xi=np.array([[0.5, 1.0]]), train_sigma=np.array([2.0]),
                    val_xi=np.zeros((1, 2)), val_sigma=np.zeros(1))
    w = inner_adapt(J, task, ModelConfig(N=100, K=2, M=1, eta_w=3.0), "linear")
    assert np.allclose(w, 3.0 / math.sqrt(2) * 2.0 * np.array([0.5, 2.0]))


def test_outer_update_hand_case():
    J = np.array([[1.0, 0.0]])
    task = TaskData(u=np.zeros(1), train_xi=np.zeros((1, 2)), train_sigma=np.zeros(1),
                    val_xi=np.array([[1.0, 3.0]]), val_sigma=np.array([2.0]))
    w = np.array([0.5])
    cfg = ModelConfig(N=100, K=1, M=1, eta_J=10.0)
    J_new, loss = outer_update(J, task, w, cfg, VariantConfig(activation="linear"))
    err = 2.0 - 0.5 * 1.0
    assert loss == pytest.approx(0.5 * err * err)
    # the input dimension comes from J (N = 2 here)
    assert np.allclose(J_new, J + 10.0 / 2 * err * 0.5 * np.array([[1.0, 3.0]]))


def test_outer_update_decay():
    J = np.ones((1, 4))
    task = TaskData(u=np.zeros(1), train_xi=np.zeros((1, 4)), train_sigma=np.zeros(1),
                    val_xi=np.zeros((1, 4)), val_sigma=np.zeros(1))
    J_new, _ = outer_update(J, task, np.zeros(1), ModelConfig(N=100, K=1, M=1, eta_J=2.0),
                            VariantConfig(lam=0.5))
    assert np.allclose(J_new, (1 - 0.5 * 2.0 / 4) * J)


def test_tasks_depend_only_on_index():
    s = init_sim(SMALL, seed=3)
    a = generate_task(s, SMALL, index=7)
    s.task_count = 7
    b = generate_task(s, SMALL)
    assert np.array_equal(a.train_xi, b.train_xi) and np.array_equal(a.u, b.u)


def test_gamma_task_teacher():
    s = init_sim(SMALL, seed=0)
    t = generate_task(s, SMALL, VariantConfig(gamma=0.6), index=0)
    assert t.delta_B is not None and t.delta_B.shape == s.B.shape


def test_run_stream_reproducible_and_recorded():
    runs = []
    for _ in range(2):
        s = init_sim(SMALL, seed=4)
        runs.append(run_stream(s, SMALL, alpha_max=0.5, record_every=0.25, n_tasks=3, n_test=10))
    a, b = runs
    assert np.array_equal(a.alphas, [0.0, 0.25, 0.5])
    assert np.array_equal(a.eps_ma, b.eps_ma)
    assert all(np.array_equal(x.Q, y.Q) for x, y in zip(a.states, b.states))
    assert a.completed


def test_train_step_advances_counter():
    s = init_sim(SMALL, seed=0)
    loss = train_step(s, SMALL)
    assert s.task_count == 1 and loss >= 0.0
    assert s.alpha == pytest.approx(1 / 200)


def test_copy_switches_task_stream():
    s = init_sim(SMALL, seed=0)
    c = s.copy(seed=9)
    assert c.seed == 9 and np.array_equal(c.J, s.J) and np.array_equal(c.B, s.B)
    c.J[0, 0] += 1.0
    assert c.J[0, 0] != s.J[0, 0]


def test_empirical_error_tracks_closed_form():
    p = OrderParams(Q=np.eye(2), R=np.diag([0.8, 0.6]), T=np.diag([1.0, 2.0]))
    cfg = ModelConfig(N=300, K=2, M=2, P=2000, V=50, eta_w=2.0)
    s = state_from_order_params(p, 300, seed=2)
    mean, se = empirical_meta_error(s, cfg, n_tasks=200, n_test=100, return_se=True)
    assert abs(mean - meta_generalization_error(p, cfg)) < 4 * se + 2e-3


def test_noise_adds_half_variance_to_error():
    # the label-noise contribution to eps is sigma/2, not sigma/(2M)
    p = OrderParams(Q=np.eye(3), R=np.diag([0.8, 0.9, 1.2]), T=np.diag([1.0, 2.0, 3.0]))
    cfg = ModelConfig(N=300, K=3, M=3, P=2000, V=50, eta_w=3.0)
    s = state_from_order_params(p, 300, seed=1)
    clean = empirical_meta_error(s, cfg, VariantConfig(), n_tasks=200, n_test=200)
    noisy = empirical_meta_error(s, cfg, VariantConfig(sigma_noise=1.0), n_tasks=200, n_test=200)
    assert noisy - clean == pytest.approx(0.5, abs=0.04)


def test_drift_methods_agree():
    p = OrderParams(Q=np.array([[0.8, 0.1], [0.1, 0.6]]), R=np.array([[0.4, 0.1], [0.0, 0.3]]),
                    T=np.diag([1.0, 2.0]))
    cfg = ModelConfig(N=400, K=2, M=2, P=50, V=50, eta_J=2.0, eta_w=3.0)
    a = one_step_drift(p, cfg, n_draws=600, seed=1, method="projected")
    b = one_step_drift(p, cfg, n_draws=600, seed=2, method="microscopic")
    z = (a.dR - b.dR) / np.hypot(a.dR_se, b.dR_se)
    assert np.max(np.abs(z)) < 4.5


def test_projected_drift_matches_theory():
    p = OrderParams(Q=np.array([[0.8, 0.1], [0.1, 0.6]]), R=np.array([[0.4, 0.1], [0.0, 0.3]]),
                    T=np.diag([1.0, 2.0]))
    cfg = ModelConfig(N=100000, K=2, M=2, P=2000, V=50, eta_J=2.0, eta_w=3.0)
    d = one_step_drift(p, cfg, n_draws=1500, seed=0)
    th = rhs(p, cfg)
    assert np.max(np.abs((d.dR - th.dR) / d.dR_se)) < 4.5
    assert np.max(np.abs((d.dQ - th.dQ) / d.dQ_se)) < 4.5


def test_drift_rejects_bad_args():
    p = OrderParams.uniform(2, 2)
    with pytest.raises(ValueError):
        one_step_drift(p, SMALL, n_draws=1)
    with pytest.raises(ValueError):
        one_step_drift(p, SMALL, method="other")


def test_sim_state_read_only_teacher():
    s = SimState(B=np.ones((1, 3)), J=np.ones((1, 3)), seed=0)
    with pytest.raises(ValueError):
        s.B[0, 0] = 2.0
