import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meta_lab import _backend
from meta_lab.dynamics import (RhsDomainError, eps_threshold_config, make_rhs, rhs, rhs_base,
                               rhs_gamma, rhs_l2_noise, rhs_linear)
from meta_lab.order_params import ModelConfig, OrderParams, VariantConfig

from reference import random_state, reference_rhs

needs_compiled = pytest.mark.skipif(_backend.compiled is None, reason="compiled kernel not built")

VARIANTS = {
    "base": VariantConfig(),
    "l2_noise": VariantConfig(lam=0.1, sigma_noise=0.01),
    "linear": VariantConfig(activation="linear"),
    "gamma": VariantConfig(gamma=0.95),
}


def _state(seed, K=3, M=3):
    Q, R, T = random_state(np.random.default_rng(seed), K, M)
    return OrderParams(Q=Q, R=R, T=T)


@pytest.mark.parametrize("K,M", [(3, 3), (2, 4), (5, 2)])
def test_base_matches_literal_sums(K, M):
    p = _state(K * 10 + M, K, M)
    cfg = ModelConfig(K=K, M=M, eta_J=6.0, eta_w=4.0, V=50)
    out = rhs_base(p, cfg)
    dR, dQ = reference_rhs(p.Q, p.R, p.T, 6.0, 4.0, 50)
    assert np.max(np.abs(out.dR - dR)) < 1e-13
    assert np.max(np.abs(out.dQ - dQ)) < 1e-12


@needs_compiled
@pytest.mark.parametrize("name", list(VARIANTS))
@pytest.mark.parametrize("expansion", ["exact", "first-order"])
def test_backend_parity(name, expansion):
    variant = VARIANTS[name]
    for seed in range(5):
        p = _state(seed)
        cfg = ModelConfig(eta_J=3.0, eta_w=9.0)
        a = make_rhs(p.T, 3, cfg, variant, expansion, backend=_backend.compiled)(p.Q, p.R)
        b = make_rhs(p.T, 3, cfg, variant, expansion, backend=_backend.fallback)(p.Q, p.R)
        for x, y in zip(a, b):
            assert np.max(np.abs(x - y)) <= 1e-12 * max(1.0, np.max(np.abs(y)))


@needs_compiled
def test_backend_rk4_parity():
    p = OrderParams.uniform(3, 3, r0=0.01)
    cfg = ModelConfig(eta_J=3.0, eta_w=9.0)
    states = []
    for mod in (_backend.compiled, _backend.fallback):
        f = make_rhs(p.T, 3, cfg, VariantConfig(), backend=mod)
        Q, R = np.array(p.Q), np.array(p.R)
        done, msg = f.rk4(Q, R, 0.01, 100)
        assert done == 100 and msg is None
        states.append((Q, R))
    assert np.allclose(states[0][0], states[1][0], atol=1e-13)
    assert np.allclose(states[0][1], states[1][1], atol=1e-13)


@pytest.mark.parametrize("name", list(VARIANTS))
def test_zero_overlap_is_fixed_point(name):
    variant = VARIANTS[name]
    if variant.lam:
        variant = VariantConfig(sigma_noise=variant.sigma_noise)
    rng = np.random.default_rng(1)
    A = rng.standard_normal((3, 5))
    B = rng.standard_normal((3, 5))
    p = OrderParams(Q=A @ A.T / 5, R=np.zeros((3, 3)), T=B @ B.T / 5)
    out = rhs(p, ModelConfig(), variant)
    assert np.max(np.abs(out.dR)) <= 1e-14
    assert np.max(np.abs(out.dQ)) <= 1e-14


def test_l2_decay_hand_value():
    A = np.random.default_rng(0).standard_normal((3, 5))
    Q = A @ A.T
    p = OrderParams(Q=Q, R=np.zeros((3, 3)), T=np.eye(3))
    lam, eta_J = 0.1, 3.0
    out = rhs_l2_noise(p, ModelConfig(eta_J=eta_J), VariantConfig(lam=lam))
    assert np.array_equal(out.dQ, -2 * lam * eta_J * p.Q)
    assert np.array_equal(out.dR, np.zeros((3, 3)))
    assert out.dQ[0, 0] / Q[0, 0] == pytest.approx(-0.6, abs=1e-15)


def test_linear_single_unit_hand_values():
    # K = M = 1, eta_J = eta_w = 1, no finite-V term: dR = r t - r^3, dQ = 2 r^2 (t - q)
    r, q, t = 0.3, 0.7, 1.0
    f = _backend.Rhs(1, np.array([[t]]), 1.0, 1.0, 0.0, linear=True)
    dR, dQ = f(np.array([[q]]), np.array([[r]]))
    assert dR[0, 0] == pytest.approx(r * t - r**3, abs=1e-15)
    assert dQ[0, 0] == pytest.approx(2 * r * r * (t - q), abs=1e-15)


def test_reductions_exact():
    cfg = ModelConfig(eta_J=3.0, eta_w=9.0)
    for seed in range(10):
        p = _state(seed)
        base = rhs_base(p, cfg)
        for other in (rhs_l2_noise(p, cfg, VariantConfig()), rhs_gamma(p, cfg, VariantConfig(gamma=1.0))):
            assert np.max(np.abs(other.dR - base.dR)) <= 1e-12
            assert np.max(np.abs(other.dQ - base.dQ)) <= 1e-12


def test_first_order_gamma_converges_to_exact():
    p = _state(0)
    cfg = ModelConfig()
    gaps = []
    for gamma in (0.99, 0.999):
        a = rhs_gamma(p, cfg, VariantConfig(gamma=gamma))
        b = rhs_gamma(p, cfg, VariantConfig(gamma=gamma), expansion="first-order")
        gaps.append(np.max(np.abs(a.dQ - b.dQ)))
    assert gaps[1] < gaps[0] / 5


def test_dq_symmetric():
    out = rhs(_state(4), ModelConfig(), VARIANTS["l2_noise"])
    assert np.array_equal(out.dQ, out.dQ.T)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.permutations([0, 1, 2]), st.sampled_from(list(VARIANTS)))
def test_student_permutation_equivariance(seed, perm, name):
    p = _state(seed)
    cfg = ModelConfig()
    a = rhs(p, cfg, VARIANTS[name])
    b = rhs(p.permute_students(perm), cfg, VARIANTS[name])
    perm = np.asarray(perm)
    assert np.allclose(b.dR, a.dR[perm], atol=1e-12)
    assert np.allclose(b.dQ, a.dQ[np.ix_(perm, perm)], atol=1e-12)


def test_domain_error_names_block():
    p = OrderParams(Q=np.eye(2), R=np.array([[5.0, 0.0], [0.0, 0.1]]), T=np.eye(2))
    with pytest.raises(RhsDomainError, match="first rejected block"):
        rhs_base(p, ModelConfig(K=2, M=2))


def test_config_mismatch_rejected():
    with pytest.raises(ValueError):
        rhs_base(_state(0), ModelConfig(K=2))


def test_gamma_zero_rejected():
    with pytest.raises(ValueError):
        rhs_gamma(_state(0), ModelConfig(), VariantConfig(gamma=0.0))


def test_wrong_variant_entry_points():
    with pytest.raises(ValueError):
        rhs_l2_noise(_state(0), ModelConfig(), VariantConfig(gamma=0.9))
    with pytest.raises(ValueError):
        rhs_gamma(_state(0), ModelConfig(), VariantConfig(activation="linear"))
    with pytest.raises(ValueError):
        make_rhs(np.eye(3), 3, ModelConfig(), expansion="second-order")


def test_linear_matches_entry_point():
    p = _state(2)
    a = rhs_linear(p, ModelConfig())
    b = rhs(p, ModelConfig(), VariantConfig(activation="linear"))
    assert np.array_equal(a.dR, b.dR) and np.array_equal(a.dQ, b.dQ)


def test_threshold_config():
    assert eps_threshold_config().threshold == 0.01
    with pytest.raises(ValueError):
        eps_threshold_config(0.0)
