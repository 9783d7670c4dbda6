"""Gaussian averages of the erf activation over jointly Gaussian local fields.

The activation is ``g(x) = erf(x / sqrt(2))`` with derivative
``g'(x) = sqrt(2/pi) exp(-x**2 / 2)``.  Every average is taken over a
zero-mean Gaussian vector whose covariance is a small symmetric block
(2x2, 3x3 or 4x4) of the full order-parameter matrix.

Closed forms
------------
i2        <g(a) g(b)>
i2_prime  <g'(a) g'(b)>
i3        <g'(a) b g(c)>
i4        <g'(a) g'(b) g(c) g(d)>

:func:`quadrature_oracle` evaluates the same expectations numerically with
tensor-product Gauss-Hermite quadrature and is the reference the closed forms
are certified against (see :func:`meta_lab.experiments.validate_integrals`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import erf

__all__ = [
    "IntegralSpec",
    "KIND_DIMS",
    "g",
    "g_prime",
    "i2",
    "i2_prime",
    "i3",
    "i4",
    "closed_form",
    "gauss_hermite",
    "quadrature_oracle",
    "random_covariance",
]

TWO_OVER_PI = 2.0 / math.pi
FOUR_OVER_PI2 = 4.0 / math.pi**2
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

PSD_TOL = 1e-10
ARCSIN_TOL = 1e-10
ORACLE_JITTER = 1e-12

KIND_DIMS = {"I2": 2, "I2prime": 2, "I3": 3, "I4": 4}
_ROLES = {
    "I2": ("g", "g"),
    "I2prime": ("g'", "g'"),
    "I3": ("g'", "linear", "g"),
    "I4": ("g'", "g'", "g", "g"),
}


def g(x):
    return erf(np.asarray(x) / math.sqrt(2.0))


def g_prime(x):
    x = np.asarray(x)
    return SQRT_2_OVER_PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class IntegralSpec:
    """Which expectation to evaluate and how covariance rows map to factors."""

    kind: str

    def __post_init__(self):
        if self.kind not in KIND_DIMS:
            raise ValueError(f"unknown integral kind {self.kind!r}; expected one of {sorted(KIND_DIMS)}")

    @property
    def dim(self) -> int:
        return KIND_DIMS[self.kind]

    @property
    def arg_roles(self) -> tuple[str, ...]:
        return _ROLES[self.kind]


def _check_cov(c, dim: int) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} covariance block, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("covariance block has non-finite entries")
    if np.max(np.abs(c - c.T)) > PSD_TOL * max(1.0, np.max(np.abs(c))):
        raise ValueError("covariance block is not symmetric")
    lo = np.linalg.eigvalsh(c).min()
    if lo < -PSD_TOL:
        raise ValueError(f"covariance block is not positive semidefinite (min eigenvalue {lo:.3e})")
    return c


def _safe_arcsin(x: float) -> float:
    if abs(x) > 1.0 + ARCSIN_TOL:
        raise ValueError(f"arcsin argument {x!r} outside [-1, 1] beyond tolerance")
    return math.asin(min(1.0, max(-1.0, x)))


def i2(c) -> float:
    """``<g(a) g(b)>`` for (a, b) ~ N(0, c)."""
    c = np.asarray(c, dtype=float)
    if c.shape != (2, 2):
        raise ValueError(f"expected a 2x2 covariance block, got shape {c.shape}")
    c11, c12, c22 = c[0, 0], c[0, 1], c[1, 1]
    if c11 < -PSD_TOL or c22 < -PSD_TOL or abs(c12) > math.sqrt(max(c11 * c22, 0.0)) + PSD_TOL:
        raise ValueError("2x2 covariance block is not positive semidefinite")
    if c12 == 0.0:
        return 0.0
    return TWO_OVER_PI * _safe_arcsin(c12 / math.sqrt((1.0 + c11) * (1.0 + c22)))


def i2_prime(c) -> float:
    """``<g'(a) g'(b)>``; equals ``(2/pi) / sqrt(det(I + c))``."""
    c = np.asarray(c, dtype=float)
    if c.shape != (2, 2):
        raise ValueError(f"expected a 2x2 covariance block, got shape {c.shape}")
    det = (1.0 + c[0, 0]) * (1.0 + c[1, 1]) - c[0, 1] * c[1, 0]
    if not det > 0.0:
        raise ValueError(f"det(I + c) = {det!r} is not positive; corrupted covariance")
    return TWO_OVER_PI / math.sqrt(det)


def i3(c) -> float:
    """``<g'(a) b g(c)>`` with rows ordered (g' argument, linear argument, g argument)."""
    c = _check_cov(c, 3)
    c11, c12, c13 = c[0, 0], c[0, 1], c[0, 2]
    c23, c33 = c[1, 2], c[2, 2]
    lam3 = (1.0 + c11) * (1.0 + c33) - c13 * c13
    return float(TWO_OVER_PI * (c23 * (1.0 + c11) - c12 * c13) / ((1.0 + c11) * math.sqrt(lam3)))


def i4(c) -> float:
    """``<g'(a) g'(b) g(c) g(d)>`` with rows ordered (g', g', g, g)."""
    c = _check_cov(c, 4)
    c11, c12, c13, c14 = c[0, 0], c[0, 1], c[0, 2], c[0, 3]
    c22, c23, c24 = c[1, 1], c[1, 2], c[1, 3]
    c33, c34, c44 = c[2, 2], c[2, 3], c[3, 3]
    lam4 = (1.0 + c11) * (1.0 + c22) - c12 * c12
    lam0 = (lam4 * c34 - c23 * c24 * (1.0 + c11) - c13 * c14 * (1.0 + c22)
            + c12 * c13 * c24 + c12 * c14 * c23)
    lam1 = (lam4 * (1.0 + c33) - c23 * c23 * (1.0 + c11) - c13 * c13 * (1.0 + c22)
            + 2.0 * c12 * c13 * c23)
    lam2 = (lam4 * (1.0 + c44) - c24 * c24 * (1.0 + c11) - c14 * c14 * (1.0 + c22)
            + 2.0 * c12 * c14 * c24)
    if lam0 == 0.0:
        return 0.0
    if not lam1 * lam2 > 0.0:
        raise ValueError(f"degenerate covariance: Lambda1 * Lambda2 = {lam1 * lam2!r}")
    return float(FOUR_OVER_PI2 / math.sqrt(lam4) * _safe_arcsin(lam0 / math.sqrt(lam1 * lam2)))


_CLOSED = {"I2": i2, "I2prime": i2_prime, "I3": i3, "I4": i4}


def closed_form(spec: IntegralSpec | str, c) -> float:
    if isinstance(spec, str):
        spec = IntegralSpec(spec)
    return _CLOSED[spec.kind](c)


@lru_cache(maxsize=8)
def _gh_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = hermegauss(n)
    return x, w / math.sqrt(2.0 * math.pi)


def _factor(c: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(c)
    if eig.min() <= 0.0 or eig.max() > 1e12 * eig.min():
        c = c + ORACLE_JITTER * np.eye(c.shape[0])
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance factorization failed after jitter") from exc


def _apply(role: str, x: np.ndarray) -> np.ndarray:
    if role == "g":
        return erf(x * (1.0 / math.sqrt(2.0)))
    if role == "g'":
        return SQRT_2_OVER_PI * np.exp(-0.5 * x * x)
    return x


def _default_nodes(dim: int) -> int:
    return {1: 200, 2: 200, 3: 80}.get(dim, 40)


def gauss_hermite(roles, c, n_nodes: int | None = None) -> float:
    """Plain tensor-product Gauss-Hermite estimate of ``<prod_i role_i(x_i)>``."""
    c = np.asarray(c, dtype=float)
    d = len(roles)
    n = n_nodes or _default_nodes(d)
    L = _factor(0.5 * (c + c.T))
    nodes, weights = _gh_rule(n)
    if d == 1:
        return float(np.sum(weights * _apply(roles[0], L[0, 0] * nodes)))
    # first axis looped, the others flattened, to bound memory in four dimensions
    grid = np.stack(np.meshgrid(*([nodes] * (d - 1)), indexing="ij"), axis=0).reshape(d - 1, -1)
    wgrid = np.ones(grid.shape[1])
    for w in np.meshgrid(*([weights] * (d - 1)), indexing="ij"):
        wgrid = wgrid * w.ravel()
    base = L[:, 1:] @ grid
    total = 0.0
    for z0, w0 in zip(nodes, weights):
        fields = base + L[:, :1] * z0
        prod = wgrid.copy()
        for row, role in enumerate(roles):
            prod *= _apply(role, fields[row])
        total += w0 * prod.sum()
    return float(total)


def quadrature_oracle(spec: IntegralSpec | str, c, n_nodes: int | None = None,
                      absorb: bool = True) -> float:
    """Numerical estimate of the expectation named by ``spec``.

    Each ``g'`` factor is an unnormalised Gaussian, so with ``absorb=True`` it
    is folded into the integration measure: the prefactor
    ``(2/pi)^(s/2) / sqrt(det(I + c_SS))`` is kept and the remaining ``g`` and
    linear factors are integrated by Gauss-Hermite quadrature under the
    conditioned covariance ``c - c_:S (I + c_SS)^-1 c_S:``.  Without this the
    narrow ``g'`` peaks at variances near 5 need hundreds of nodes per axis.
    I2prime has nothing left after absorption and always runs unabsorbed.
    ``absorb=False`` integrates every factor directly on the original measure.
    """
    if isinstance(spec, str):
        spec = IntegralSpec(spec)
    c = np.asarray(c, dtype=float)
    if c.shape != (spec.dim, spec.dim):
        raise ValueError(f"{spec.kind} needs a {spec.dim}x{spec.dim} covariance, got {c.shape}")
    c = 0.5 * (c + c.T)
    roles = spec.arg_roles
    s_idx = [i for i, r in enumerate(roles) if r == "g'"]
    r_idx = [i for i, r in enumerate(roles) if r != "g'"]
    if not absorb or not s_idx or not r_idx:
        return gauss_hermite(roles, c, n_nodes)
    css = c[np.ix_(s_idx, s_idx)]
    a = np.eye(len(s_idx)) + css
    pref = (2.0 / math.pi) ** (len(s_idx) / 2) / math.sqrt(np.linalg.det(a))
    crs = c[np.ix_(r_idx, s_idx)]
    cond = c[np.ix_(r_idx, r_idx)] - crs @ np.linalg.solve(a, crs.T)
    return pref * gauss_hermite([roles[i] for i in r_idx], cond, n_nodes)


def random_covariance(rng: np.random.Generator, dim: int, diag_range=(0.1, 5.0)) -> np.ndarray:
    """Random PSD covariance with variances drawn uniformly from ``diag_range``.

    A random Gram matrix is normalised to a correlation matrix and rescaled,
    so every correlation is valid and the diagonal lands in range exactly.
    """
    a = rng.standard_normal((dim, dim + rng.integers(0, 3)))
    gram = a @ a.T
    s = np.sqrt(np.diag(gram))
    corr = gram / np.outer(s, s)
    sd = np.sqrt(rng.uniform(*diag_range, size=dim))
    c = corr * np.outer(sd, sd)
    return 0.5 * (c + c.T)
