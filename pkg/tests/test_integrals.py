import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meta_lab.integrals import (KIND_DIMS, IntegralSpec, closed_form, g, g_prime, gauss_hermite, i2,
                                i2_prime, i3, i4, quadrature_oracle, random_covariance)

# Frozen values: closed form, cross-checked against the quadrature oracle below.
I2_CASE = 0.21408615168862072          # c11=0.5, c22=2, c12=0.7
I3_ONES = 1.0 / (math.pi * math.sqrt(3.0))
I4_ONES = 0.05912496890314281


def test_activation_and_derivative():
    x = np.linspace(-4, 4, 81)
    h = 1e-6
    assert np.allclose((g(x + h) - g(x - h)) / (2 * h), g_prime(x), atol=1e-9)
    assert g(0.0) == 0.0
    assert g_prime(0.0) == pytest.approx(math.sqrt(2 / math.pi))


def test_i2_frozen_value():
    c = np.array([[0.5, 0.7], [0.7, 2.0]])
    assert i2(c) == pytest.approx(I2_CASE, abs=1e-15)
    assert quadrature_oracle("I2", c) == pytest.approx(I2_CASE, abs=1e-12)
    assert round(I2_CASE, 5) == 0.21409


def test_i2_hand_values():
    assert i2(np.eye(2)) == 0.0
    assert i2(np.ones((2, 2))) == pytest.approx(1 / 3, abs=1e-15)  # (2/pi) asin(1/2)


def test_i2_prime_identity():
    assert i2_prime(np.eye(2)) == pytest.approx(1 / math.pi, abs=1e-15)


def test_i3_all_ones():
    c = np.ones((3, 3))
    assert i3(c) == pytest.approx(I3_ONES, abs=1e-15)
    assert quadrature_oracle("I3", c) == pytest.approx(I3_ONES, abs=1e-10)


def test_i4_all_ones():
    c = np.ones((4, 4))
    assert i4(c) == pytest.approx(I4_ONES, abs=1e-15)
    assert quadrature_oracle("I4", c) == pytest.approx(I4_ONES, abs=1e-10)


def test_i4_zero_cross_is_zero():
    c = np.eye(4)
    assert i4(c) == 0.0


@pytest.mark.parametrize("kind", list(KIND_DIMS))
def test_closed_form_matches_oracle_random(kind):
    rng = np.random.default_rng(7)
    for _ in range(25):
        c = random_covariance(rng, KIND_DIMS[kind])
        assert closed_form(kind, c) == pytest.approx(quadrature_oracle(kind, c), abs=1e-8)


@pytest.mark.parametrize("kind", ["I3", "I4"])
def test_absorbed_and_direct_quadrature_agree(kind):
    rng = np.random.default_rng(3)
    c = random_covariance(rng, KIND_DIMS[kind], diag_range=(0.2, 1.0))
    direct = quadrature_oracle(kind, c, n_nodes=60 if kind == "I4" else 120, absorb=False)
    assert quadrature_oracle(kind, c) == pytest.approx(direct, abs=1e-6)


def test_gauss_hermite_moments():
    c = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert gauss_hermite(["linear", "linear"], c) == pytest.approx(0.3, abs=1e-12)


def test_non_psd_rejected():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        i2(bad)
    with pytest.raises(ValueError):
        i3(np.array([[1.0, 0, 3.0], [0, 1.0, 0], [3.0, 0, 1.0]]))


def test_wrong_shape_rejected():
    with pytest.raises(ValueError):
        i2(np.eye(3))
    with pytest.raises(ValueError):
        quadrature_oracle("I4", np.eye(3))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        IntegralSpec("I5")


def test_random_covariance_in_range():
    rng = np.random.default_rng(0)
    for dim in (2, 3, 4):
        c = random_covariance(rng, dim)
        assert np.allclose(c, c.T)
        assert np.linalg.eigvalsh(c).min() > -1e-12
        assert np.all((np.diag(c) >= 0.1) & (np.diag(c) <= 5.0))


@st.composite
def covariances(draw, dim):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_covariance(np.random.default_rng(seed), dim)


@settings(max_examples=60, deadline=None)
@given(covariances(2))
def test_i2_symmetric_and_bounded(c):
    swapped = c[::-1, ::-1]
    assert i2(c) == pytest.approx(i2(swapped), abs=1e-15)
    assert abs(i2(c)) <= 1.0


@settings(max_examples=60, deadline=None)
@given(covariances(4))
def test_i4_symmetries(c):
    v = i4(c)
    # swapping the two g' arguments or the two g arguments leaves the average unchanged
    for perm in ([1, 0, 2, 3], [0, 1, 3, 2]):
        assert i4(c[np.ix_(perm, perm)]) == pytest.approx(v, abs=1e-14)
    # flipping the sign of one g argument flips the sign (g is odd, g' is even)
    s = np.diag([1.0, 1.0, -1.0, 1.0])
    assert i4(s @ c @ s) == pytest.approx(-v, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(covariances(3))
def test_i3_linear_in_middle_argument(c):
    # scaling the linear field scales the average
    s = np.diag([1.0, 2.5, 1.0])
    assert i3(s @ c @ s) == pytest.approx(2.5 * i3(c), rel=1e-12, abs=1e-15)
