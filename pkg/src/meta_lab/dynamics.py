"""Right-hand sides of the averaged order-parameter ODEs.

Each function returns ``RhsOutput(dR, dQ)`` with ``dR = dR/dalpha`` and
``dQ = dQ/dalpha``.  The heavy lifting (integral tables and their sums) is
done by the backend chosen in :mod:`meta_lab._backend`.

Teacher variability
-------------------
For ``gamma < 1`` every task uses the teacher rows
``gamma B_m + sqrt(1 - gamma^2) dB_m`` with fresh ``dB_m`` of unit squared
norm.  For large N the task-teacher fields are Gaussian with
``cov(x_k, t_m) = gamma R_km``, ``cov(t_m, t_n) = gamma^2 T_mn +
(1 - gamma^2) delta_mn`` and ``cov(y_n, t_m) = gamma T_nm``, so the base
equations apply verbatim with those covariances (``expansion="exact"``).
``expansion="first-order"`` instead linearises the teacher in
``sqrt(1 - gamma^2)``, which keeps ``T -> gamma^2 T`` and adds a noise-like
term to dQ.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _backend
from ._backend import KernelDomainError
from .integrals import i2, i3, i4
from .order_params import ModelConfig, OrderParams, VariantConfig

__all__ = [
    "RhsOutput",
    "ThresholdEvent",
    "RhsDomainError",
    "make_rhs",
    "rhs_base",
    "rhs_l2_noise",
    "rhs_linear",
    "rhs_gamma",
    "rhs",
    "eps_threshold_config",
    "EXPANSIONS",
]

EXPANSIONS = ("exact", "first-order")


class RhsDomainError(ValueError):
    """An integral inside the RHS got a covariance block outside its domain."""


@dataclass(frozen=True)
class RhsOutput:
    dR: np.ndarray
    dQ: np.ndarray


@dataclass(frozen=True)
class ThresholdEvent:
    """Downward crossing of the meta-generalization error through ``threshold``."""

    threshold: float = 0.01


def eps_threshold_config(threshold: float = 0.01) -> ThresholdEvent:
    threshold = float(threshold)
    if not threshold > 0.0:
        raise ValueError(f"threshold must be positive, got {threshold!r}")
    return ThresholdEvent(threshold)


def make_rhs(T: np.ndarray, K: int, config: ModelConfig, variant: VariantConfig | None = None,
             expansion: str = "exact", backend=None):
    """Backend ``Rhs`` object for a fixed teacher overlap and variant.

    The returned object maps ``(Q, R) -> (dR, dQ)`` and offers ``rk4`` for
    advancing a state in place.
    """
    variant = variant or VariantConfig()
    if expansion not in EXPANSIONS:
        raise ValueError(f"expansion must be one of {EXPANSIONS}, got {expansion!r}")
    if variant.kind == "gamma" and variant.gamma == 0.0:
        raise ValueError("gamma = 0 is outside the range of the variability reduction")
    cls = backend.Rhs if backend is not None else _backend.Rhs
    return cls(int(K), np.ascontiguousarray(T, dtype=float), config.eta_J, config.eta_w,
               1.0 / config.V, lam=variant.lam, sigma=variant.sigma_noise, gamma=variant.gamma,
               first_order=(expansion == "first-order"), linear=(variant.activation == "linear"))


def _locate(params: OrderParams, gamma: float) -> str:
    """Name the first covariance block the scalar integrals reject."""
    K, M = params.K, params.M
    g2 = gamma * gamma
    C = np.block([[params.Q, gamma * params.R],
                  [gamma * params.R.T, g2 * params.T + (1.0 - g2) * np.eye(M)]])

    def block(idx):
        return C[np.ix_(idx, idx)]

    fields = [K + m for m in range(M)] + list(range(K))
    try:
        for k in range(K):
            for m in range(M):
                i2(block([k, K + m]))
            for a in fields:
                i3(block([k, k, a]))
            for l in range(K):
                for a in fields:
                    for b in fields:
                        i4(block([k, l, a, b]))
    except ValueError as exc:
        return f"(k={k}, l={locals().get('l')}, fields={locals().get('a')},{locals().get('b')}): {exc}"
    return "no offending block found by the scalar integrals"


def _evaluate(params: OrderParams, config: ModelConfig, variant: VariantConfig,
              expansion: str = "exact") -> RhsOutput:
    if params.K and config.K != params.K:
        raise ValueError(f"config K={config.K} does not match state K={params.K}")
    if config.M != params.M:
        raise ValueError(f"config M={config.M} does not match state M={params.M}")
    f = make_rhs(params.T, params.K, config, variant, expansion)
    try:
        dR, dQ = f(params.Q, params.R)
    except KernelDomainError as exc:
        raise RhsDomainError(f"{exc}; first rejected block {_locate(params, variant.gamma)}") from exc
    return RhsOutput(dR=dR, dQ=0.5 * (dQ + dQ.T))


def rhs_base(params: OrderParams, config: ModelConfig) -> RhsOutput:
    """Plain erf model: no decay, no label noise, identical teacher across tasks."""
    return _evaluate(params, config, VariantConfig())


def rhs_l2_noise(params: OrderParams, config: ModelConfig, variant: VariantConfig) -> RhsOutput:
    """erf model with L2 decay on J and Gaussian label noise."""
    if variant.activation != "erf" or variant.gamma != 1.0:
        raise ValueError("rhs_l2_noise needs the erf activation with gamma = 1")
    return _evaluate(params, config, variant)


def rhs_linear(params: OrderParams, config: ModelConfig) -> RhsOutput:
    """Identity activation; every integral reduces to an overlap."""
    return _evaluate(params, config, VariantConfig(activation="linear"))


def rhs_gamma(params: OrderParams, config: ModelConfig, variant: VariantConfig,
              expansion: str = "exact") -> RhsOutput:
    """erf model with per-task teacher perturbations of strength ``sqrt(1 - gamma^2)``."""
    if variant.activation != "erf":
        raise ValueError("rhs_gamma needs the erf activation")
    if not 0.0 < variant.gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {variant.gamma!r}")
    return _evaluate(params, config, variant, expansion)


def rhs(params: OrderParams, config: ModelConfig, variant: VariantConfig | None = None,
        expansion: str = "exact") -> RhsOutput:
    """Dispatch on ``variant.kind``."""
    variant = variant or VariantConfig()
    table: dict[str, Callable[[], RhsOutput]] = {
        "base": lambda: rhs_base(params, config),
        "l2_noise": lambda: rhs_l2_noise(params, config, variant),
        "linear": lambda: rhs_linear(params, config),
        "gamma": lambda: rhs_gamma(params, config, variant, expansion),
    }
    return table[variant.kind]()
