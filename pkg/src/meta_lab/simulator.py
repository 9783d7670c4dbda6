"""Finite-N Monte Carlo simulation of first-order ANIL on streaming tasks.

Microscopic model
-----------------
Inputs ``xi ~ N(0, I_N)``.  Task ``t`` draws a head ``u ~ N(0, I_M)`` and
labels ``sigma = u . g(B_t xi) / sqrt(M) (+ noise)``, with ``B_t = B`` or,
under teacher variability, ``gamma B + sqrt(1 - gamma^2) dB_t``.  The
student adapts its head from zero in one step on P training examples,

    w_k = eta_w / (P sqrt(K)) sum_mu sigma^mu g(J_k . xi^mu),

and the meta-learner updates J on V validation examples,

    J_k <- (1 - lam eta_J / N) J_k
           + eta_J / (N V sqrt(K)) sum_nu (sigma^nu - s^nu) w_k g'(J_k . xi^nu) xi^nu,

where ``s`` is the adapted student's output.  One task advances alpha by 1/N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .integrals import g, g_prime
from .order_params import (ModelConfig, OrderParams, VariantConfig, cosine_similarity,
                           meta_generalization_error)
from .rng import stream

__all__ = [
    "SimState",
    "TaskData",
    "SimTrajectory",
    "DriftEstimate",
    "init_sim",
    "state_from_order_params",
    "generate_task",
    "inner_adapt",
    "outer_update",
    "train_step",
    "measure_order_params",
    "empirical_meta_error",
    "run_stream",
    "one_step_drift",
]


@dataclass
class SimState:
    """Meta-teacher ``B`` (fixed), meta-learner ``J`` and the task counter.

    Task ``t`` draws from streams keyed by ``(seed, role, t)``.
    """

    B: np.ndarray
    J: np.ndarray
    seed: int
    task_count: int = 0

    def __post_init__(self):
        self.B = np.array(self.B, dtype=float)
        self.B.setflags(write=False)
        self.J = np.array(self.J, dtype=float)

    @property
    def N(self) -> int:
        return self.B.shape[1]

    @property
    def alpha(self) -> float:
        return self.task_count / self.N

    def copy(self, seed: int | None = None) -> "SimState":
        """Independent copy, optionally switching to another task stream."""
        return SimState(B=self.B, J=self.J.copy(), seed=self.seed if seed is None else seed,
                        task_count=self.task_count)


@dataclass
class TaskData:
    u: np.ndarray
    train_xi: np.ndarray
    train_sigma: np.ndarray
    val_xi: np.ndarray
    val_sigma: np.ndarray
    delta_B: np.ndarray | None = None


@dataclass
class SimTrajectory:
    """Recorded samples of one simulated run.

    ``eps_theory`` is the closed-form error at the measured overlaps,
    ``eps_empirical`` a fresh-task estimate at each sample and ``eps_ma``
    the moving average of per-task validation losses over the preceding
    window (at alpha = 0 it falls back to ``eps_empirical``).
    """

    alphas: np.ndarray
    states: list
    eps_theory: np.ndarray
    eps_empirical: np.ndarray
    eps_ma: np.ndarray
    rho: np.ndarray
    completed: bool = True
    failure: str | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.alphas)

    def series(self, name: str) -> np.ndarray:
        return np.stack([getattr(s, name) for s in self.states])


def init_sim(config: ModelConfig, variant: VariantConfig | None = None, seed: int = 0,
             matched: bool = False, q0: float = 0.5) -> SimState:
    """Random meta-teacher and meta-learner with rows drawn from ``N(0, I_N / N)``.

    With ``matched=True`` the rows of J are orthonormalised and scaled so that
    ``Q = q0 I`` holds exactly; the student-teacher overlaps keep their
    sampled ``O(N^-1/2)`` values.
    """
    N, K, M = config.N, config.K, config.M
    B = stream(seed, "init_B").standard_normal((M, N)) / math.sqrt(N)
    J = stream(seed, "init_J").standard_normal((K, N)) / math.sqrt(N)
    if matched:
        if K > N:
            raise ValueError("matched initialisation needs K <= N")
        q, r = np.linalg.qr(J.T)
        J = math.sqrt(q0) * (q * np.sign(np.diag(r))).T
    return SimState(B=B, J=J, seed=seed)


def state_from_order_params(params: OrderParams, N: int, seed: int = 0) -> SimState:
    """Microscopic J and B whose overlaps equal ``params`` exactly (to rounding).

    The joint overlap matrix is factorised and its rows are placed on the
    first ``K + M`` coordinate axes; input isotropy makes any other
    orthonormal frame equivalent.
    """
    C = params.C
    K, M = params.K, params.M
    if N < K + M:
        raise ValueError(f"N={N} is smaller than K + M = {K + M}")
    evals, evecs = np.linalg.eigh(0.5 * (C + C.T))
    if evals.min() < -1e-9:
        raise ValueError("overlap matrix is not positive semidefinite")
    L = evecs * np.sqrt(np.clip(evals, 0.0, None))
    W = np.zeros((K + M, N))
    W[:, :K + M] = L
    return SimState(B=W[K:], J=W[:K], seed=seed)


def _teacher_rows(state: SimState, variant: VariantConfig, index: int):
    if variant.gamma == 1.0:
        return state.B, None
    dB = stream(state.seed, "delta_B", index).standard_normal(state.B.shape) / math.sqrt(state.N)
    return variant.gamma * state.B + math.sqrt(1.0 - variant.gamma**2) * dB, dB


def _labels(xi, rows, u, activation):
    y = xi @ rows.T
    act = y if activation == "linear" else g(y)
    return act @ u / math.sqrt(len(u))


def _act(x, activation):
    return x if activation == "linear" else g(x)


def _act_prime(x, activation):
    return np.ones_like(x) if activation == "linear" else g_prime(x)


def generate_task(state: SimState, config: ModelConfig, variant: VariantConfig | None = None,
                  index: int | None = None, u: np.ndarray | None = None,
                  n_train: int | None = None, n_val: int | None = None) -> TaskData:
    """Draw task ``index`` (default: the next one) with its training and validation sets.

    ``u`` overrides the drawn task vector (test hook).
    """
    variant = variant or VariantConfig()
    t = state.task_count if index is None else index
    seed, N = state.seed, state.N
    P = config.P if n_train is None else n_train
    V = config.V if n_val is None else n_val
    if u is None:
        u = stream(seed, "u", t).standard_normal(config.M)
    u = np.asarray(u, dtype=float)
    rows, dB = _teacher_rows(state, variant, t)
    train_xi = stream(seed, "train", t).standard_normal((P, N))
    val_xi = stream(seed, "val", t).standard_normal((V, N))
    train_sigma = _labels(train_xi, rows, u, variant.activation)
    val_sigma = _labels(val_xi, rows, u, variant.activation)
    if variant.sigma_noise > 0.0:
        noise = stream(seed, "noise", t).standard_normal(P + V) * math.sqrt(variant.sigma_noise)
        train_sigma = train_sigma + noise[:P]
        val_sigma = val_sigma + noise[P:]
    return TaskData(u=u, train_xi=train_xi, train_sigma=train_sigma, val_xi=val_xi,
                    val_sigma=val_sigma, delta_B=dB)


def inner_adapt(J: np.ndarray, task: TaskData, config: ModelConfig,
                activation: str = "erf") -> np.ndarray:
    """One gradient step on the head from ``w = 0``."""
    K = J.shape[0]
    P = len(task.train_sigma)
    feats = _act(task.train_xi @ J.T, activation)
    return config.eta_w / (P * math.sqrt(K)) * (task.train_sigma @ feats)


def outer_update(J: np.ndarray, task: TaskData, w: np.ndarray, config: ModelConfig,
                 variant: VariantConfig | None = None) -> tuple[np.ndarray, float]:
    """First-order meta-gradient step on J.

    Returns the updated J and the validation loss of the adapted student
    before the update, which is an unbiased single-task estimate of the
    meta-generalization error at the current J.
    """
    variant = variant or VariantConfig()
    K, N = J.shape
    V = len(task.val_sigma)
    x = task.val_xi @ J.T
    err = task.val_sigma - _act(x, variant.activation) @ w / math.sqrt(K)
    h = err[:, None] * w[None, :] * _act_prime(x, variant.activation)
    decay = 1.0 - variant.lam * config.eta_J / N
    J_new = decay * J + config.eta_J / (N * V * math.sqrt(K)) * (h.T @ task.val_xi)
    return J_new, 0.5 * float(np.mean(err * err))


def train_step(state: SimState, config: ModelConfig, variant: VariantConfig | None = None) -> float:
    """Generate, adapt and update for the next task; returns its validation loss."""
    variant = variant or VariantConfig()
    task = generate_task(state, config, variant)
    w = inner_adapt(state.J, task, config, variant.activation)
    state.J, loss = outer_update(state.J, task, w, config, variant)
    state.task_count += 1
    return loss


def measure_order_params(state: SimState) -> OrderParams:
    J, B = state.J, state.B
    Q = J @ J.T
    T = B @ B.T
    return OrderParams(Q=0.5 * (Q + Q.T), R=J @ B.T, T=0.5 * (T + T.T))


def empirical_meta_error(state: SimState, config: ModelConfig, variant: VariantConfig | None = None,
                         n_tasks: int = 20, n_test: int = 50, return_se: bool = False,
                         u_override: np.ndarray | None = None):
    """Mean test loss over ``n_tasks`` fresh tasks after one-step head adaptation.

    Each task gets a fresh P-example training set and ``n_test`` test points.
    Draws come from the ``test`` stream at the current task count, so the
    estimate never consumes training randomness.
    """
    variant = variant or VariantConfig()
    if n_tasks < 1 or n_test < 1:
        raise ValueError("n_tasks and n_test must be at least 1")
    rng = stream(state.seed, "test", state.task_count)
    N, M, P, K = state.N, config.M, config.P, state.J.shape[0]
    losses = np.empty(n_tasks)
    for i in range(n_tasks):
        u = rng.standard_normal(M) if u_override is None else np.asarray(u_override, float)
        if variant.gamma < 1.0:
            dB = rng.standard_normal(state.B.shape) / math.sqrt(N)
            rows = variant.gamma * state.B + math.sqrt(1.0 - variant.gamma**2) * dB
        else:
            rows = state.B
        xi = rng.standard_normal((P + n_test, N))
        sigma = _labels(xi, rows, u, variant.activation)
        if variant.sigma_noise > 0.0:
            sigma = sigma + rng.standard_normal(P + n_test) * math.sqrt(variant.sigma_noise)
        task = TaskData(u=u, train_xi=xi[:P], train_sigma=sigma[:P], val_xi=xi[P:], val_sigma=sigma[P:])
        w = inner_adapt(state.J, task, config, variant.activation)
        out = _act(task.val_xi @ state.J.T, variant.activation) @ w / math.sqrt(K)
        losses[i] = 0.5 * np.mean((task.val_sigma - out) ** 2)
    mean = float(losses.mean())
    if return_se:
        se = float(losses.std(ddof=1) / math.sqrt(n_tasks)) if n_tasks > 1 else math.nan
        return mean, se
    return mean


def run_stream(state: SimState, config: ModelConfig, variant: VariantConfig | None = None,
               alpha_max: float = 1.0, record_every: float = 0.5, ma_window: float = 0.05,
               n_tasks: int = 20, n_test: int = 50) -> SimTrajectory:
    """Train on ``floor(alpha_max N)`` tasks, recording on the alpha grid.

    ``state`` is advanced in place.  A non-finite J stops the run; the
    trajectory then ends at the last recorded sample.
    """
    variant = variant or VariantConfig()
    if not alpha_max > 0.0:
        raise ValueError("alpha_max must be positive")
    N = state.N
    start = state.task_count
    total = int(math.floor(alpha_max * N + 1e-9))
    every = max(1, int(round(record_every * N)))
    marks = list(range(0, total + 1, every))
    if marks[-1] != total:
        marks.append(total)
    window = max(1, int(round(ma_window * N)))
    recent: list[float] = []
    alphas, states, eps_t, eps_e, eps_ma, rhos = [], [], [], [], [], []
    failure = None

    def record():
        params = measure_order_params(state)
        e_emp = empirical_meta_error(state, config, variant, n_tasks, n_test)
        alphas.append(state.task_count / N)
        states.append(params)
        eps_t.append(meta_generalization_error(params, config, variant))
        eps_e.append(e_emp)
        eps_ma.append(float(np.mean(recent[-window:])) if recent else e_emp)
        rhos.append(cosine_similarity(params))

    record()
    done = 0
    for mark in marks[1:]:
        while done < mark:
            recent.append(train_step(state, config, variant))
            done += 1
            if len(recent) > window:
                del recent[0]
        if not np.all(np.isfinite(state.J)):
            failure = f"non-finite J at task {start + done}"
            break
        record()
    return SimTrajectory(alphas=np.array(alphas), states=states, eps_theory=np.array(eps_t),
                         eps_empirical=np.array(eps_e), eps_ma=np.array(eps_ma), rho=np.array(rhos),
                         completed=failure is None, failure=failure,
                         meta={"seed": state.seed, "N": N, "window_tasks": window})


@dataclass(frozen=True)
class DriftEstimate:
    """Ensemble mean and standard error of ``N`` times the one-task change in R and Q."""

    dR: np.ndarray
    dR_se: np.ndarray
    dQ: np.ndarray
    dQ_se: np.ndarray
    n_draws: int


def _bartlett(rng: np.random.Generator, df: int, dim: int) -> np.ndarray:
    """Lower-triangular A with ``A A^T ~ Wishart(df, I_dim)``."""
    A = np.tril(rng.standard_normal((dim, dim)), -1)
    A[np.diag_indices(dim)] = np.sqrt(rng.chisquare(df - np.arange(dim)))
    return A


def _sym_sqrt(S: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(0.5 * (S + S.T))
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def _projected_draws(params: OrderParams, config: ModelConfig, variant: VariantConfig,
                     n: int, rng: np.random.Generator):
    """``n`` exact samples of ``(N dR, N dQ)`` for one task from the state ``params``.

    J and B span ``r = K + M`` directions; with teacher variability the
    perturbations add M more.  Inputs are isotropic, so only their
    coordinates in this ``s``-dimensional span matter, except through the
    squared norm of the update.  The part of ``dJ`` outside the span is
    ``c h^T X`` with X a ``V x (N - s)`` Gaussian block independent of
    everything else, whose Gram ``c^2 h^T X X^T h`` is drawn directly from
    ``Wishart(N - s, c^2 h^T h)``.  Nothing here is approximated.
    """
    K, M, N, P, V = params.K, params.M, config.N, config.P, config.V
    act = variant.activation
    C = params.C
    r = K + M
    L = _sym_sqrt(C)
    s = r + (M if variant.gamma < 1.0 else 0)
    if N <= s + K:
        raise ValueError(f"N={N} too small for the projected sampler (needs > {s + K})")
    Js = np.zeros((K, s))
    Bs = np.zeros((M, s))
    Js[:, :r] = L[:K]
    Bs[:, :r] = L[K:]
    R_emb = Js @ Bs.T
    Q_emb = Js @ Js.T
    c = config.eta_J / (N * V * math.sqrt(K))
    decay = 1.0 - variant.lam * config.eta_J / N
    sq_noise = math.sqrt(variant.sigma_noise)
    out_R = np.empty((n, K, M))
    out_Q = np.empty((n, K, K))
    for i in range(n):
        u = rng.standard_normal(M)
        if variant.gamma < 1.0:
            dB = np.zeros((M, s))
            dB[:, :r] = rng.standard_normal((M, r))
            # the components outside J, B span M fresh directions; their Gram is Wishart(N - r)
            dB[:, r:] = _bartlett(rng, N - r, M)
            dB /= math.sqrt(N)
            Bt = variant.gamma * Bs + math.sqrt(1.0 - variant.gamma**2) * dB
        else:
            Bt = Bs
        Z = rng.standard_normal((P + V, s))
        x = Z @ Js.T
        y = Z @ Bt.T
        sigma = _act(y, act) @ u / math.sqrt(M)
        if variant.sigma_noise > 0.0:
            sigma = sigma + sq_noise * rng.standard_normal(P + V)
        w = config.eta_w / (P * math.sqrt(K)) * (sigma[:P] @ _act(x[:P], act))
        xv = x[P:]
        err = sigma[P:] - _act(xv, act) @ w / math.sqrt(K)
        h = err[:, None] * w[None, :] * _act_prime(xv, act)
        dJ = c * (h.T @ Z[P:])
        Lh = _sym_sqrt(c * c * (h.T @ h))
        A = _bartlett(rng, N - s, K)
        outside = Lh @ A @ A.T @ Lh.T
        cross = Js @ dJ.T
        out_R[i] = -variant.lam * config.eta_J * R_emb + N * (dJ @ Bs.T)
        out_Q[i] = (N * (decay * decay - 1.0) * Q_emb + N * decay * (cross + cross.T)
                    + N * (dJ @ dJ.T + outside))
    return out_R, out_Q


def _microscopic_draws(params: OrderParams, config: ModelConfig, variant: VariantConfig,
                       n: int, seed: int):
    base = state_from_order_params(params, config.N, seed)
    N = base.N
    Q0 = base.J @ base.J.T
    R0 = base.J @ base.B.T
    out_R = np.empty((n,) + R0.shape)
    out_Q = np.empty((n,) + Q0.shape)
    for i in range(n):
        task = generate_task(base, config, variant, index=i)
        w = inner_adapt(base.J, task, config, variant.activation)
        J1, _ = outer_update(base.J, task, w, config, variant)
        out_R[i] = N * (J1 @ base.B.T - R0)
        out_Q[i] = N * (J1 @ J1.T - Q0)
    return out_R, out_Q


def one_step_drift(params: OrderParams, config: ModelConfig, variant: VariantConfig | None = None,
                   n_draws: int = 2000, seed: int = 0, method: str = "projected") -> DriftEstimate:
    """Estimate ``N <dR>`` and ``N <dQ>`` over independent single tasks from one state.

    ``method="microscopic"`` runs :func:`generate_task`, :func:`inner_adapt`
    and :func:`outer_update` on a state built by
    :func:`state_from_order_params` with ``config.N`` inputs.
    ``method="projected"`` samples the same increments exactly in the span of
    the weight vectors (see :func:`_projected_draws`); its cost does not grow
    with N, which is what makes large ensembles affordable.
    """
    variant = variant or VariantConfig()
    if n_draws < 2:
        raise ValueError("n_draws must be at least 2")
    if method == "projected":
        dR, dQ = _projected_draws(params, config, variant, n_draws, stream(seed, "drift"))
    elif method == "microscopic":
        dR, dQ = _microscopic_draws(params, config, variant, n_draws, seed)
    else:
        raise ValueError(f"unknown drift method {method!r}")
    root = math.sqrt(n_draws)
    return DriftEstimate(dR=dR.mean(0), dR_se=dR.std(0, ddof=1) / root,
                         dQ=dQ.mean(0), dQ_se=dQ.std(0, ddof=1) / root, n_draws=n_draws)
