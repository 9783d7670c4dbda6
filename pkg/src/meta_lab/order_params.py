"""Macroscopic state of the teacher-student meta-learning problem.

The learner's first-layer weights J (K x N) and the meta-teacher's B (M x N)
enter the averaged dynamics only through the overlaps

    Q = J J^T,   R = J B^T,   T = B B^T,

which are the covariances of the local fields x = J xi and y = B xi.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .integrals import TWO_OVER_PI

__all__ = [
    "ModelConfig",
    "VariantConfig",
    "OrderParams",
    "Trajectory",
    "DegenerateNormError",
    "assemble_covariance",
    "cosine_similarity",
    "meta_generalization_error",
    "f_table",
    "task_teacher_overlaps",
]

RHO_TOL = 1e-12
SYM_TOL = 1e-10


class DegenerateNormError(ValueError):
    """A student or teacher unit has zero norm, so its cosine similarity is undefined."""


@dataclass(frozen=True)
class ModelConfig:
    """Sizes and learning rates.

    ``eta_J`` is the outer-loop rate already scaled by N (the microscopic
    step is ``eta_J / N``).
    """

    N: int = 1000
    K: int = 3
    M: int = 3
    P: int = 100
    V: int = 100
    eta_w: float = 4.0
    eta_J: float = 6.0

    def __post_init__(self):
        for name in ("N", "K", "M", "P", "V"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        for name in ("eta_w", "eta_J"):
            value = float(getattr(self, name))
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite nonnegative number, got {value!r}")
            object.__setattr__(self, name, value)
        if self.N < 100:
            warnings.warn(f"N={self.N} is small; simulator results carry large finite-size effects",
                          stacklevel=3)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class VariantConfig:
    """Model variant: activation, teacher variability, L2 decay and label noise.

    ``lam`` is the L2 coefficient (``lambda`` in config files).
    """

    activation: str = "erf"
    gamma: float = 1.0
    lam: float = 0.0
    sigma_noise: float = 0.0

    def __post_init__(self):
        if self.activation not in ("erf", "linear"):
            raise ValueError(f"activation must be 'erf' or 'linear', got {self.activation!r}")
        gamma, lam, sigma = float(self.gamma), float(self.lam), float(self.sigma_noise)
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma!r}")
        if not lam >= 0.0:
            raise ValueError(f"lambda must be nonnegative, got {lam!r}")
        if not sigma >= 0.0:
            raise ValueError(f"sigma_noise must be nonnegative, got {sigma!r}")
        if self.activation == "linear" and (gamma != 1.0 or lam != 0.0 or sigma != 0.0):
            raise ValueError("linear activation supports only gamma=1, lambda=0, sigma_noise=0")
        if gamma < 1.0 and (lam > 0.0 or sigma > 0.0):
            raise ValueError("gamma < 1 cannot be combined with lambda or sigma_noise")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "sigma_noise", sigma)

    @property
    def kind(self) -> str:
        if self.activation == "linear":
            return "linear"
        if self.gamma < 1.0:
            return "gamma"
        if self.lam > 0.0 or self.sigma_noise > 0.0:
            return "l2_noise"
        return "base"


def _frozen(a, shape=None, name="array") -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if shape is not None and a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OrderParams:
    """Overlap matrices Q (K x K), R (K x M) and T (M x M)."""

    Q: np.ndarray
    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        R = _frozen(self.R, name="R")
        if R.ndim != 2:
            raise ValueError("R must be a K x M matrix")
        K, M = R.shape
        Q = _frozen(self.Q, (K, K), "Q")
        T = _frozen(self.T, (M, M), "T")
        for name, a in (("Q", Q), ("T", T)):
            if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(a))):
                raise ValueError(f"{name} is not symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @property
    def K(self) -> int:
        return self.R.shape[0]

    @property
    def M(self) -> int:
        return self.R.shape[1]

    @property
    def C(self) -> np.ndarray:
        """Joint covariance ``[[Q, R], [R^T, T]]`` of the local fields (x, y)."""
        return np.block([[self.Q, self.R], [self.R.T, self.T]])

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.C).min())

    def check_psd(self, tol: float = 1e-9) -> "OrderParams":
        lo = self.min_eigenvalue()
        if lo < -tol:
            raise ValueError(f"overlap matrix C is not positive semidefinite (min eigenvalue {lo:.3e})")
        return self

    def evolve(self, Q, R) -> "OrderParams":
        """New state with updated Q and R; T is carried over unchanged."""
        return OrderParams(Q=Q, R=R, T=self.T)

    def permute_students(self, perm: Sequence[int]) -> "OrderParams":
        perm = np.asarray(perm)
        return OrderParams(Q=self.Q[np.ix_(perm, perm)], R=self.R[perm], T=self.T)

    def __eq__(self, other):
        if not isinstance(other, OrderParams):
            return NotImplemented
        return (np.array_equal(self.Q, other.Q) and np.array_equal(self.R, other.R)
                and np.array_equal(self.T, other.T))

    @classmethod
    def uniform(cls, K: int, M: int, q0: float = 0.5, r0: float = 1e-12,
                t_diag: Sequence[float] | None = None) -> "OrderParams":
        """``Q = q0 I``, ``R = r0`` everywhere and ``T = diag(t_diag)`` (default 1..M)."""
        if t_diag is None:
            t_diag = np.arange(1, M + 1, dtype=float)
        return cls(Q=q0 * np.eye(K), R=np.full((K, M), float(r0)), T=np.diag(np.asarray(t_diag, float)))


@dataclass
class Trajectory:
    """Order parameters, meta-generalization error and cosine similarities on a schedule of alpha.

    ``completed`` is False when integration stopped early on a non-finite
    state; ``failure`` then holds the reason and the last recorded alpha is
    the last good one.
    """

    alphas: np.ndarray
    states: list
    eps_meta: np.ndarray
    rho: np.ndarray
    completed: bool = True
    failure: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.eps_meta = np.asarray(self.eps_meta, dtype=float)
        n = len(self.alphas)
        if len(self.states) != n or len(self.eps_meta) != n or len(self.rho) != n:
            raise ValueError("trajectory series have unequal lengths")
        if n > 1 and np.any(np.diff(self.alphas) <= 0):
            raise ValueError("trajectory alphas must be strictly increasing")
        self.rho = np.asarray(self.rho, dtype=float)

    def __len__(self) -> int:
        return len(self.alphas)

    @property
    def final(self) -> OrderParams:
        return self.states[-1]

    @property
    def last_alpha(self) -> float:
        return float(self.alphas[-1])

    def series(self, name: str) -> np.ndarray:
        """``'Q'``, ``'R'`` or ``'T'`` stacked along the alpha axis."""
        return np.stack([getattr(s, name) for s in self.states])


def assemble_covariance(params: OrderParams, student_idx: Sequence[int] = (),
                        teacher_idx: Sequence[int] = ()) -> np.ndarray:
    """Principal submatrix of C over the selected student then teacher fields, in the order given."""
    student_idx = [int(i) for i in student_idx]
    teacher_idx = [int(i) for i in teacher_idx]
    for i in student_idx:
        if not 0 <= i < params.K:
            raise IndexError(f"student index {i} out of range [0, {params.K})")
    for n in teacher_idx:
        if not 0 <= n < params.M:
            raise IndexError(f"teacher index {n} out of range [0, {params.M})")
    rows = student_idx + [params.K + n for n in teacher_idx]
    if not rows:
        return np.zeros((0, 0))
    return params.C[np.ix_(rows, rows)]


def cosine_similarity(params: OrderParams) -> np.ndarray:
    """``rho_kn = R_kn / sqrt(Q_kk T_nn)``, clamped into [-1, 1] after a bound check."""
    q = np.diag(params.Q)
    t = np.diag(params.T)
    for k in np.flatnonzero(q <= 0.0):
        raise DegenerateNormError(f"student unit {k} has Q_kk = {q[k]!r}")
    for n in np.flatnonzero(t <= 0.0):
        raise DegenerateNormError(f"teacher unit {n} has T_nn = {t[n]!r}")
    rho = params.R / np.sqrt(np.outer(q, t))
    worst = np.max(np.abs(rho), initial=0.0)
    if worst > 1.0 + RHO_TOL:
        k, n = np.unravel_index(np.argmax(np.abs(rho)), rho.shape)
        raise ValueError(f"|rho[{k},{n}]| = {worst!r} exceeds 1; overlaps violate Cauchy-Schwarz")
    return np.clip(rho, -1.0, 1.0)


def f_table(cross: np.ndarray, var_a: np.ndarray, var_b: np.ndarray) -> np.ndarray:
    """Vectorised ``<g(a) g(b)>`` for cross covariances ``cross[i, j]`` and variances ``var_a[i]``, ``var_b[j]``."""
    arg = cross / np.sqrt(np.outer(1.0 + var_a, 1.0 + var_b))
    if np.any(np.abs(arg) > 1.0 + 1e-10):
        raise ValueError("arcsin argument outside [-1, 1]; covariance is not positive semidefinite")
    return TWO_OVER_PI * np.arcsin(np.clip(arg, -1.0, 1.0))


def task_teacher_overlaps(params: OrderParams, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Overlaps with a task teacher ``gamma B + sqrt(1 - gamma^2) dB``.

    The perturbation rows are independent with unit squared norm, so the
    student overlap is ``gamma R`` and the teacher self-overlap is
    ``gamma^2 T + (1 - gamma^2) I``.
    """
    if gamma == 1.0:
        return params.R, params.T
    g2 = gamma * gamma
    return gamma * params.R, g2 * params.T + (1.0 - g2) * np.eye(params.M)


def meta_generalization_error(params: OrderParams, config: ModelConfig,
                              variant: VariantConfig | None = None) -> float:
    """Expected test error on a fresh task after one inner-loop step on its training set."""
    variant = variant or VariantConfig()
    K, M, eta_w = params.K, params.M, config.eta_w
    Q = params.Q
    R, T = task_teacher_overlaps(params, variant.gamma)
    if variant.activation == "linear":
        teacher = np.trace(T)
        overlap = np.sum(R * R)
        cross = np.einsum("kl,kn,ln->", Q, R, R)
    else:
        qd, td = np.diag(Q), np.diag(T)
        f = f_table(R, qd, td)
        teacher = TWO_OVER_PI * np.sum(np.arcsin(td / (1.0 + td)))
        overlap = np.sum(f * f)
        cross = np.einsum("kl,kn,ln->", f_table(Q, qd, qd), f, f)
    eps = (teacher / (2.0 * M) - eta_w / (K * M) * overlap
           + eta_w**2 / (2.0 * K * K * M) * cross + 0.5 * variant.sigma_noise)
    return float(eps)
