"""Time integration of the order-parameter ODEs.

Two schemes are provided: classical RK4 with a fixed step (the default,
bitwise reproducible) and an embedded Runge-Kutta-Fehlberg 4(5) with
step-size control.  Both land exactly on the recording grid
``0, record_every, 2 record_every, ..., alpha_max``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._backend import KernelDomainError
from .dynamics import ThresholdEvent, make_rhs
from .order_params import (ModelConfig, OrderParams, Trajectory, VariantConfig,
                           cosine_similarity, meta_generalization_error)

__all__ = [
    "IntegrationPlan",
    "CrossingReport",
    "StepSizeUnderflow",
    "record_grid",
    "rk4_system",
    "rkf45_system",
    "integrate",
    "first_crossing",
]

METHODS = ("rk4_fixed", "rkf45_adaptive")


class StepSizeUnderflow(RuntimeError):
    """The adaptive step dropped below ``min_step``."""


@dataclass(frozen=True)
class IntegrationPlan:
    alpha_max: float
    method: str = "rk4_fixed"
    step: float = 0.01
    record_every: float = 0.5
    rtol: float = 1e-8
    atol: float = 1e-10
    min_step: float = 1e-10
    max_step: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("alpha_max", "step", "record_every", "rtol", "atol", "min_step", "max_step"):
            value = float(getattr(self, name))
            if not (value > 0.0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")
            object.__setattr__(self, name, value)
        if self.method == "rk4_fixed":
            if not self.step < self.alpha_max:
                raise ValueError("step must be smaller than alpha_max")
            if self.record_every < self.step * (1.0 - 1e-12):
                raise ValueError("record_every must be at least one step")
        if self.min_step > self.max_step:
            raise ValueError("min_step exceeds max_step")


@dataclass(frozen=True)
class CrossingReport:
    crossed: bool
    alpha_tilde: float | None = None


def record_grid(alpha_max: float, record_every: float) -> np.ndarray:
    """``0, h, 2h, ...`` up to ``alpha_max``, always ending exactly at ``alpha_max``."""
    n = int(math.floor(alpha_max / record_every + 1e-9))
    grid = record_every * np.arange(n + 1)
    if alpha_max - grid[-1] > 1e-9 * record_every:
        grid = np.append(grid, alpha_max)
    else:
        grid[-1] = alpha_max
    return grid


def _substeps(span: float, step: float) -> tuple[int, float]:
    n = max(1, int(math.ceil(span / step - 1e-9)))
    return n, span / n


def rk4_system(f: Callable[[float, np.ndarray], np.ndarray], y0, plan: IntegrationPlan):
    """Fixed-step RK4 for a generic system ``y' = f(alpha, y)``.

    Returns ``(alphas, ys, failure)``; ``failure`` is None on success.
    """
    grid = record_grid(plan.alpha_max, plan.record_every)
    y = np.array(y0, dtype=float)
    ys = [y.copy()]
    for a0, a1 in zip(grid[:-1], grid[1:]):
        n, h = _substeps(a1 - a0, plan.step)
        a = a0
        for i in range(n):
            k1 = f(a, y)
            k2 = f(a + 0.5 * h, y + 0.5 * h * k1)
            k3 = f(a + 0.5 * h, y + 0.5 * h * k2)
            k4 = f(a + h, y + h * k3)
            y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            a = a0 + (i + 1) * h
        if not np.all(np.isfinite(y)):
            return grid[:len(ys)], ys, f"non-finite state after alpha={float(a0)!r}"
        ys.append(y.copy())
    return grid, ys, None


# Fehlberg 4(5) tableau
_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)
_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)


def rkf45_system(f: Callable[[float, np.ndarray], np.ndarray], y0, plan: IntegrationPlan,
                 post: Callable[[np.ndarray], np.ndarray] | None = None):
    """Adaptive RKF45 (fifth-order solution propagated) on the recording grid.

    ``post`` is applied to every accepted state (used to symmetrise Q).
    Raises :class:`StepSizeUnderflow` when the controller needs a step below
    ``plan.min_step``.
    """
    grid = record_grid(plan.alpha_max, plan.record_every)
    y = np.array(y0, dtype=float)
    ys = [y.copy()]
    a = 0.0
    h = min(plan.max_step, plan.record_every, 0.01)
    for target in grid[1:]:
        while a < target:
            h_try = min(h, target - a)
            last = h_try == target - a
            try:
                ks = []
                for s in range(6):
                    ys_ = y + h_try * sum(c * k for c, k in zip(_A[s], ks)) if s else y
                    ks.append(f(a + _C[s] * h_try, ys_))
            except (KernelDomainError, FloatingPointError):
                err = math.inf
            else:
                y5 = y + h_try * sum(b * k for b, k in zip(_B5, ks))
                y4 = y + h_try * sum(b * k for b, k in zip(_B4, ks))
                scale = plan.atol + plan.rtol * np.maximum(np.abs(y), np.abs(y5))
                err = float(np.max(np.abs(y5 - y4) / scale)) if y.size else 0.0
                if not math.isfinite(err):
                    err = math.inf
            if err <= 1.0:
                y = post(y5) if post is not None else y5
                a = target if last else a + h_try
                factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                if not last or factor < 1.0:
                    h = min(plan.max_step, h_try * factor)
            else:
                h = h_try * (0.2 if not math.isfinite(err) else max(0.1, 0.9 * err ** -0.25))
                if h < plan.min_step:
                    if not math.isfinite(err) and not np.all(np.isfinite(y)):
                        return grid[:len(ys)], ys, f"non-finite state after alpha={float(a)!r}"
                    raise StepSizeUnderflow(f"step size {h:.3e} below min_step at alpha={float(a)!r}")
        ys.append(y.copy())
    return grid, ys, None


def _pack(Q, R):
    K = Q.shape[0]
    return np.concatenate([Q[np.triu_indices(K)], R.ravel()])


def _unpack(y, K, M):
    iu = np.triu_indices(K)
    Q = np.zeros((K, K))
    Q[iu] = y[:len(iu[0])]
    Q = Q + np.triu(Q, 1).T
    R = y[len(iu[0]):].reshape(K, M)
    return Q, R


def integrate(init: OrderParams, config: ModelConfig, variant: VariantConfig | None = None,
              plan: IntegrationPlan | None = None, expansion: str = "exact",
              backend=None) -> Trajectory:
    """Integrate from ``init`` and record order parameters, eps and rho on the grid.

    A non-finite state or an integral domain error stops the run; the
    trajectory then holds every sample up to the last good one and
    ``completed`` is False.
    """
    variant = variant or VariantConfig()
    plan = plan or IntegrationPlan(alpha_max=100.0)
    if config.K != init.K or config.M != init.M:
        raise ValueError(f"config (K={config.K}, M={config.M}) does not match the initial state "
                         f"(K={init.K}, M={init.M})")
    init.check_psd()
    f = make_rhs(init.T, init.K, config, variant, expansion, backend=backend)
    K, M = init.K, init.M
    failure = None
    if plan.method == "rk4_fixed":
        grid = record_grid(plan.alpha_max, plan.record_every)
        Q = np.array(init.Q, dtype=float, order="C")
        R = np.array(init.R, dtype=float, order="C")
        samples = [(Q.copy(), R.copy())]
        for a0, a1 in zip(grid[:-1], grid[1:]):
            n, h = _substeps(a1 - a0, plan.step)
            done, failure = f.rk4(Q, R, h, n)
            if failure is not None:
                failure = f"{failure} between alpha={float(a0)!r} and alpha={float(a1)!r}"
                break
            samples.append((Q.copy(), R.copy()))
        grid = grid[:len(samples)]
    else:
        def fun(_a, y):
            Q_, R_ = _unpack(y, K, M)
            dR, dQ = f(Q_, R_)
            return _pack(dQ, dR)

        grid, ys, failure = rkf45_system(fun, _pack(init.Q, init.R), plan)
        samples = [_unpack(y, K, M) for y in ys]

    states, eps, rho = [], [], []
    for Q, R in samples:
        s = init.evolve(Q, R)
        states.append(s)
        eps.append(meta_generalization_error(s, config, variant))
        try:
            rho.append(cosine_similarity(s))
        except ValueError as exc:
            failure = failure or f"invalid overlaps: {exc}"
            rho.append(np.clip(s.R / np.sqrt(np.outer(np.abs(np.diag(s.Q)), np.diag(s.T))), -1.0, 1.0))
    meta = {"method": plan.method, "expansion": expansion,
            "backend": type(f).__module__.rsplit(".", 1)[-1]}
    return Trajectory(alphas=grid, states=states, eps_meta=np.array(eps), rho=np.array(rho),
                      completed=failure is None, failure=failure, meta=meta)


def first_crossing(trajectory: Trajectory | tuple, event: ThresholdEvent) -> CrossingReport:
    """Earliest recorded alpha with ``eps <= threshold``, linearly interpolated.

    Accepts a :class:`Trajectory` or an ``(alphas, eps)`` pair.
    """
    if isinstance(trajectory, Trajectory):
        alphas, eps = trajectory.alphas, trajectory.eps_meta
    else:
        alphas, eps = (np.asarray(a, dtype=float) for a in trajectory)
    thr = event.threshold
    below = np.flatnonzero(eps <= thr)
    if below.size == 0:
        return CrossingReport(False)
    i = int(below[0])
    if i == 0:
        return CrossingReport(True, float(alphas[0]))
    a0, a1, e0, e1 = alphas[i - 1], alphas[i], eps[i - 1], eps[i]
    return CrossingReport(True, float(a0 + (e0 - thr) * (a1 - a0) / (e0 - e1)))
