"""Declarative experiments: config parsing, presets, runners and artifacts.

An experiment is one JSON document.  Every section is optional except
``kind``; unknown keys anywhere raise :class:`ConfigError`.  Example::

    {
      "kind": "theory",
      "name": "fig3b",
      "model": {"K": 3, "M": 3, "eta_J": 3, "eta_w": 9, "V": 100},
      "init": {"preset": "paper-fig3"},
      "plan": {"alpha_max": 500, "record_every": 1}
    }

Artifacts go to ``<out>/<name>/``: one CSV per trajectory, a sweep or
validation table, and ``manifest.json`` with the resolved config, the seeds
and the SHA-256 of every CSV.  Numbers are written with 17 significant
digits and every unit of work is seeded by its own identity, so reruns are
byte-identical whatever the number of worker processes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from ._backend import BACKEND
from .dynamics import EXPANSIONS, eps_threshold_config
from .integrals import KIND_DIMS, closed_form, quadrature_oracle, random_covariance
from .ode import IntegrationPlan, first_crossing, integrate
from .order_params import ModelConfig, OrderParams, Trajectory, VariantConfig
from .rng import stream
from .simulator import SimTrajectory, init_sim, run_stream, state_from_order_params

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "InitSpec",
    "RunSpec",
    "SimulationSpec",
    "SweepSpec",
    "ValidationSpec",
    "SweepRow",
    "ValidationReport",
    "KINDS",
    "PRESETS",
    "DEFAULT_OUT",
    "parse_config",
    "load_config",
    "preset_config",
    "resolve_out_dir",
    "run_experiment",
    "sweep",
    "validate_integrals",
    "trajectory_header",
    "format_number",
]

KINDS = ("theory", "simulate", "compare", "sweep", "validate-integrals")
SWEEP_AXES = ("K", "eta_J", "eta_w")
SIM_INITS = ("random", "matched", "order-params")
INIT_PRESETS = ("paper-fig3",)
DEFAULT_OUT = "meta_lab_out"
ENV_OUT = "META_LAB_OUT"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# config sections

def _check_keys(data: Any, allowed: Sequence[str], where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}; "
                          f"allowed: {', '.join(allowed)}")
    return data


def _number(value, where: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if integer:
        if int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if not math.isfinite(value):
        raise ConfigError(f"{where}: expected a finite number, got {value!r}")
    return float(value)


def _matrix(value, where: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected a numeric matrix ({exc})") from None
    if a.ndim != 2 or not np.all(np.isfinite(a)):
        raise ConfigError(f"{where}: expected a finite 2-D matrix")
    return a


MODEL_FIELDS = ("N", "K", "M", "P", "V", "eta_w", "eta_J")
VARIANT_FIELDS = ("activation", "gamma", "lambda", "sigma_noise", "expansion")
PLAN_FIELDS = ("alpha_max", "method", "step", "record_every", "rtol", "atol", "min_step", "max_step")


def _model(data: dict, base: ModelConfig, where: str) -> ModelConfig:
    _check_keys(data, MODEL_FIELDS, where)
    changes = {k: _number(v, f"{where}.{k}", integer=k in ("N", "K", "M", "P", "V"))
               for k, v in data.items()}
    try:
        return base.with_(**changes)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _variant(data: dict, base: tuple[VariantConfig, str], where: str) -> tuple[VariantConfig, str]:
    _check_keys(data, VARIANT_FIELDS, where)
    v, expansion = base
    kw = {"activation": v.activation, "gamma": v.gamma, "lam": v.lam, "sigma_noise": v.sigma_noise}
    for k, val in data.items():
        if k == "activation":
            kw["activation"] = val
        elif k == "expansion":
            if val not in EXPANSIONS:
                raise ConfigError(f"{where}.expansion: expected one of {EXPANSIONS}, got {val!r}")
            expansion = val
        else:
            kw["lam" if k == "lambda" else k] = _number(val, f"{where}.{k}")
    try:
        return VariantConfig(**kw), expansion
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _plan(data: dict, base: IntegrationPlan, where: str) -> IntegrationPlan:
    _check_keys(data, PLAN_FIELDS, where)
    kw = {k: getattr(base, k) for k in PLAN_FIELDS}
    for k, v in data.items():
        kw[k] = v if k == "method" else _number(v, f"{where}.{k}")
    try:
        return IntegrationPlan(**kw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _plan_dict(plan: IntegrationPlan) -> dict:
    return {k: getattr(plan, k) for k in PLAN_FIELDS}


def _model_dict(m: ModelConfig) -> dict:
    return {k: getattr(m, k) for k in MODEL_FIELDS}


def _variant_dict(v: VariantConfig, expansion: str) -> dict:
    return {"activation": v.activation, "gamma": v.gamma, "lambda": v.lam,
            "sigma_noise": v.sigma_noise, "expansion": expansion}


@dataclass(frozen=True)
class InitSpec:
    """Initial order parameters for the theory engine.

    ``preset="paper-fig3"`` means ``Q = q0 I``, ``R = r0`` everywhere and
    ``T = diag(1..M)``; explicit ``Q``, ``R`` or ``T`` replace the matching
    preset block.  Without a preset all three matrices are required.
    """

    preset: str | None = "paper-fig3"
    q0: float = 0.5
    r0: float = 1e-12
    Q: tuple | None = None
    R: tuple | None = None
    T: tuple | None = None

    FIELDS = ("preset", "q0", "r0", "Q", "R", "T")

    @classmethod
    def from_dict(cls, data: dict, base: "InitSpec", where: str) -> "InitSpec":
        _check_keys(data, cls.FIELDS, where)
        kw = {k: getattr(base, k) for k in cls.FIELDS}
        if "preset" in data:
            if data["preset"] is not None and data["preset"] not in INIT_PRESETS:
                raise ConfigError(f"{where}.preset: unknown init preset {data['preset']!r}; "
                                  f"expected one of {INIT_PRESETS} or null")
            kw["preset"] = data["preset"]
        for k in ("q0", "r0"):
            if k in data:
                kw[k] = _number(data[k], f"{where}.{k}")
        for k in ("Q", "R", "T"):
            if k in data:
                kw[k] = None if data[k] is None else _freeze(_matrix(data[k], f"{where}.{k}"))
        if kw["preset"] is None and any(kw[k] is None for k in ("Q", "R", "T")):
            raise ConfigError(f"{where}: without a preset, Q, R and T must all be given")
        return cls(**kw)

    def resolve(self, K: int, M: int, where: str = "init") -> OrderParams:
        Q = np.array(self.Q) if self.Q is not None else self.q0 * np.eye(K)
        R = np.array(self.R) if self.R is not None else np.full((K, M), self.r0)
        T = np.array(self.T) if self.T is not None else np.diag(np.arange(1.0, M + 1))
        try:
            return OrderParams(Q=Q, R=R, T=T).check_psd()
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None

    def to_dict(self) -> dict:
        out = {"preset": self.preset, "q0": self.q0, "r0": self.r0}
        for k in ("Q", "R", "T"):
            out[k] = None if getattr(self, k) is None else [list(r) for r in getattr(self, k)]
        return out


def _freeze(a: np.ndarray) -> tuple:
    return tuple(tuple(float(x) for x in row) for row in a)


@dataclass(frozen=True)
class SimulationSpec:
    """Settings for the finite-N simulator.

    ``init`` picks the microscopic start: ``random`` rows from N(0, I/N),
    ``matched`` the same with J orthonormalised to ``Q = q0 I``, or
    ``order-params`` a J, B pair realising the resolved ``init`` block
    exactly.  With ``init_seed`` set every run shares the microscopic start
    drawn from that seed and only the task streams differ.
    """

    init: str = "random"
    init_seed: int | None = None
    ma_window: float = 0.05
    n_tasks: int = 20
    n_test: int = 50

    FIELDS = ("init", "init_seed", "ma_window", "n_tasks", "n_test")

    @classmethod
    def from_dict(cls, data: dict, base: "SimulationSpec", where: str) -> "SimulationSpec":
        _check_keys(data, cls.FIELDS, where)
        kw = {k: getattr(base, k) for k in cls.FIELDS}
        if "init" in data:
            if data["init"] not in SIM_INITS:
                raise ConfigError(f"{where}.init: expected one of {SIM_INITS}, got {data['init']!r}")
            kw["init"] = data["init"]
        if "init_seed" in data:
            kw["init_seed"] = None if data["init_seed"] is None else \
                _number(data["init_seed"], f"{where}.init_seed", integer=True)
            if kw["init_seed"] is not None and kw["init_seed"] < 0:
                raise ConfigError(f"{where}.init_seed: must be nonnegative")
        if "ma_window" in data:
            kw["ma_window"] = _number(data["ma_window"], f"{where}.ma_window")
            if kw["ma_window"] <= 0:
                raise ConfigError(f"{where}.ma_window: must be positive")
        for k in ("n_tasks", "n_test"):
            if k in data:
                kw[k] = _number(data[k], f"{where}.{k}", integer=True)
                if kw[k] < 1:
                    raise ConfigError(f"{where}.{k}: must be at least 1")
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass(frozen=True)
class SweepSpec:
    """Grid over ``K``, ``eta_J`` and ``eta_w``; missing axes use the model value."""

    axes: tuple = ()
    threshold: float = 0.01

    FIELDS = ("axes", "threshold")

    @classmethod
    def from_dict(cls, data: dict, base: "SweepSpec", where: str) -> "SweepSpec":
        _check_keys(data, cls.FIELDS, where)
        axes = dict(base.axes)
        if "axes" in data:
            raw = _check_keys(data["axes"], SWEEP_AXES, f"{where}.axes")
            axes = {}
            for name, values in raw.items():
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"{where}.axes.{name}: expected a nonempty list")
                axes[name] = tuple(_number(v, f"{where}.axes.{name}", integer=name == "K")
                                   for v in values)
        threshold = base.threshold
        if "threshold" in data:
            threshold = _number(data["threshold"], f"{where}.threshold")
            if threshold <= 0:
                raise ConfigError(f"{where}.threshold: must be positive")
        return cls(axes=tuple((k, axes[k]) for k in SWEEP_AXES if k in axes), threshold=threshold)

    def to_dict(self) -> dict:
        return {"axes": {k: list(v) for k, v in self.axes}, "threshold": self.threshold}


@dataclass(frozen=True)
class ValidationSpec:
    count: int = 1000
    tolerance: float = 1e-6
    seed: int = 0

    FIELDS = ("count", "tolerance", "seed")

    @classmethod
    def from_dict(cls, data: dict, base: "ValidationSpec", where: str) -> "ValidationSpec":
        _check_keys(data, cls.FIELDS, where)
        kw = {k: getattr(base, k) for k in cls.FIELDS}
        if "count" in data:
            kw["count"] = _number(data["count"], f"{where}.count", integer=True)
            if kw["count"] < 1:
                raise ConfigError(f"{where}.count: must be at least 1")
        if "tolerance" in data:
            kw["tolerance"] = _number(data["tolerance"], f"{where}.tolerance")
            if kw["tolerance"] < 0:
                raise ConfigError(f"{where}.tolerance: must be nonnegative")
        if "seed" in data:
            kw["seed"] = _number(data["seed"], f"{where}.seed", integer=True)
            if kw["seed"] < 0:
                raise ConfigError(f"{where}.seed: must be nonnegative")
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass(frozen=True)
class RunSpec:
    """One fully resolved trajectory setting (a labelled entry of ``runs``)."""

    label: str
    model: ModelConfig
    variant: VariantConfig
    expansion: str
    init: InitSpec

    def to_dict(self) -> dict:
        return {"label": self.label, "model": _model_dict(self.model),
                "variant": _variant_dict(self.variant, self.expansion), "init": self.init.to_dict()}


TOP_FIELDS = ("kind", "name", "model", "variant", "plan", "init", "seeds", "simulation",
              "sweep", "validation", "runs", "output")
RUN_FIELDS = ("label", "model", "variant", "init")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    name: str
    model: ModelConfig
    variant: VariantConfig
    expansion: str
    plan: IntegrationPlan
    init: InitSpec
    seeds: tuple
    simulation: SimulationSpec
    sweep: SweepSpec
    validation: ValidationSpec
    runs: tuple = ()
    output: str | None = None

    def resolved_runs(self) -> tuple:
        if self.runs:
            return self.runs
        return (RunSpec("main", self.model, self.variant, self.expansion, self.init),)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "model": _model_dict(self.model),
            "variant": _variant_dict(self.variant, self.expansion),
            "plan": _plan_dict(self.plan),
            "init": self.init.to_dict(),
            "seeds": list(self.seeds),
            "simulation": self.simulation.to_dict(),
            "sweep": self.sweep.to_dict(),
            "validation": self.validation.to_dict(),
            "runs": [{"label": r.label, "model": _model_dict(r.model),
                      "variant": _variant_dict(r.variant, r.expansion), "init": r.init.to_dict()}
                     for r in self.runs],
            "output": self.output,
        }


def parse_config(data: Any) -> ExperimentConfig:
    """Validate a config document (already decoded from JSON) and fill defaults."""
    _check_keys(data, TOP_FIELDS, "config")
    if "kind" not in data:
        raise ConfigError("config.kind: missing; expected one of " + ", ".join(KINDS))
    kind = data["kind"]
    if kind not in KINDS:
        raise ConfigError(f"config.kind: expected one of {KINDS}, got {kind!r}")
    name = data.get("name", kind)
    if not isinstance(name, str) or not name or any(c in name for c in "/\\") or name in (".", ".."):
        raise ConfigError(f"config.name: expected a plain file-name string, got {name!r}")
    model = _model(data.get("model", {}), ModelConfig(V=100), "model")
    variant, expansion = _variant(data.get("variant", {}), (VariantConfig(), "exact"), "variant")
    plan_data = data.get("plan", {})
    plan = _plan(plan_data, IntegrationPlan(alpha_max=450.0 if kind == "sweep" else 100.0), "plan")
    init = InitSpec.from_dict(data.get("init", {}), InitSpec(), "init")

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list):
        raise ConfigError("seeds: expected a list of nonnegative integers")
    seeds = tuple(_number(s, f"seeds[{i}]", integer=True) for i, s in enumerate(seeds))
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds: entries must be nonnegative")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: entries must be distinct")
    if kind in ("simulate", "compare") and not seeds:
        raise ConfigError(f"seeds: kind={kind} needs at least one seed")

    simulation = SimulationSpec.from_dict(data.get("simulation", {}), SimulationSpec(), "simulation")
    sweep_spec = SweepSpec.from_dict(data.get("sweep", {}), SweepSpec(), "sweep")
    if kind == "sweep" and not sweep_spec.axes:
        raise ConfigError("sweep.axes: kind=sweep needs at least one axis")
    if kind == "sweep" and "K" in dict(sweep_spec.axes) and (init.Q is not None or init.R is not None):
        raise ConfigError("init: explicit Q or R cannot be combined with a K sweep axis")
    validation = ValidationSpec.from_dict(data.get("validation", {}), ValidationSpec(), "validation")

    runs_data = data.get("runs", [])
    if not isinstance(runs_data, list):
        raise ConfigError("runs: expected a list")
    if runs_data and kind in ("sweep", "validate-integrals"):
        raise ConfigError(f"runs: not supported for kind={kind}")
    runs, labels = [], set()
    for i, r in enumerate(runs_data):
        where = f"runs[{i}]"
        _check_keys(r, RUN_FIELDS, where)
        label = r.get("label")
        if not isinstance(label, str) or not label or not all(c.isalnum() or c in "-_." for c in label):
            raise ConfigError(f"{where}.label: expected a nonempty name of letters, digits, '-', '_' or '.'")
        if label in labels:
            raise ConfigError(f"{where}.label: duplicate label {label!r}")
        labels.add(label)
        m = _model(r.get("model", {}), model, f"{where}.model")
        v, e = _variant(r.get("variant", {}), (variant, expansion), f"{where}.variant")
        ini = InitSpec.from_dict(r.get("init", {}), init, f"{where}.init")
        runs.append(RunSpec(label, m, v, e, ini))

    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output: expected a directory path string")

    cfg = ExperimentConfig(kind=kind, name=name, model=model, variant=variant, expansion=expansion,
                           plan=plan, init=init, seeds=seeds, simulation=simulation,
                           sweep=sweep_spec, validation=validation, runs=tuple(runs), output=output)
    if kind in ("theory", "compare") or (kind == "simulate" and simulation.init == "order-params"):
        for run in cfg.resolved_runs():
            where = "init" if not cfg.runs else f"runs[{run.label}].init"
            run.init.resolve(run.model.K, run.model.M, where)
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data)


# ---------------------------------------------------------------------------
# presets

_FIG3 = {"model": {"K": 3, "M": 3, "eta_J": 3, "V": 100},
         "init": {"preset": "paper-fig3"},
         "plan": {"alpha_max": 500, "record_every": 1}}

PRESETS: dict[str, tuple[str, dict]] = {
    "fig2": ("theory vs simulation, N=500 desk scale, 10 task seeds from one shared start", {
        "kind": "compare",
        "model": {"N": 500, "K": 3, "M": 3, "P": 100, "V": 100, "eta_J": 6, "eta_w": 4},
        "plan": {"alpha_max": 20, "record_every": 1},
        "seeds": list(range(10)),
        "simulation": {"init": "random", "init_seed": 1000},
    }),
    "fig3": ("K=M=3, eta_J=3: plateau at eta_w=3 and specialization at eta_w=9",
             dict(_FIG3, kind="theory", runs=[{"label": "eta_w3", "model": {"eta_w": 3}},
                                               {"label": "eta_w9", "model": {"eta_w": 9}}])),
    "fig3a": ("K=M=3, eta_J=3, eta_w=3: symmetric plateau up to alpha=500",
              dict(_FIG3, kind="theory", model=dict(_FIG3["model"], eta_w=3))),
    "fig3b": ("K=M=3, eta_J=3, eta_w=9: three drops to full specialization",
              dict(_FIG3, kind="theory", model=dict(_FIG3["model"], eta_w=9))),
    "fig4": ("alpha_tilde heatmaps over (eta_J, eta_w) for K=3..9, M=3, alpha_final=450", {
        "kind": "sweep",
        "model": {"M": 3, "V": 100},
        "init": {"preset": "paper-fig3"},
        "plan": {"alpha_max": 450, "record_every": 1},
        "sweep": {"axes": {"K": [3, 4, 5, 6, 7, 8, 9],
                           "eta_J": [1, 2, 3, 4, 6, 8, 12, 16],
                           "eta_w": [3, 4.5, 6, 9, 12, 16, 20, 28]},
                  "threshold": 0.01},
    }),
    "fig5": ("overparameterized K=6, M=3, eta_J=3, eta_w=9: two students per teacher unit", {
        "kind": "theory",
        "model": {"K": 6, "M": 3, "eta_J": 3, "eta_w": 9, "V": 100},
        "init": {"preset": "paper-fig3"},
        "plan": {"alpha_max": 1000, "record_every": 1},
    }),
    "fig6": ("teacher variability gamma in {0.9, 0.95, 0.99, 1}, K=M=3, eta_J=6, eta_w=8", {
        "kind": "theory",
        "model": {"K": 3, "M": 3, "eta_J": 6, "eta_w": 8, "V": 100},
        "init": {"preset": "paper-fig3"},
        "plan": {"alpha_max": 500, "record_every": 1},
        "runs": [{"label": f"gamma{g}", "variant": {"gamma": g}} for g in (0.9, 0.95, 0.99, 1.0)],
    }),
    "appC": ("self-averaging: simulator spread of Q at P=V in {20, 50, 100}, N=500", {
        "kind": "simulate",
        "model": {"N": 500, "K": 3, "M": 3, "eta_J": 6, "eta_w": 4},
        "plan": {"alpha_max": 20, "record_every": 1},
        "seeds": list(range(10)),
        "simulation": {"init": "random", "init_seed": 1000},
        "runs": [{"label": f"V{v}", "model": {"P": v, "V": v}} for v in (20, 50, 100)],
    }),
    "appF": ("linear activation, three initial R: rank-1, rank-2 and full representation", {
        "kind": "theory",
        "model": {"K": 3, "M": 3, "eta_J": 3, "eta_w": 0.5, "V": 100},
        "variant": {"activation": "linear"},
        "init": {"preset": "paper-fig3"},
        "plan": {"alpha_max": 1000, "record_every": 1},
        "runs": [
            {"label": "uniform", "init": {"R": [[1e-12] * 3] * 3}},
            {"label": "R11", "init": {"R": [[1.1e-12, 1e-12, 1e-12], [1e-12] * 3, [1e-12] * 3]}},
            {"label": "R11_R31", "init": {"R": [[1.1e-12, 1e-12, 1e-12], [1e-12] * 3,
                                               [1.2e-12, 1e-12, 1e-12]]}},
        ],
    }),
}


def preset_config(name: str) -> dict:
    """Config document (a fresh copy) for preset ``name``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    doc = copy.deepcopy(PRESETS[name][1])
    doc.setdefault("name", name)
    return doc


def resolve_out_dir(cli_out: str | None, config_out: str | None) -> Path:
    """``--out`` wins, then the config's ``output``, then ``$META_LAB_OUT``, then the default."""
    for candidate in (cli_out, config_out, os.environ.get(ENV_OUT) or None):
        if candidate:
            return Path(candidate)
    return Path(DEFAULT_OUT)


# ---------------------------------------------------------------------------
# serialization

def format_number(x) -> str:
    """17 significant digits; integers stay integers, NaN is ``nan``."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def trajectory_header(K: int, M: int, extra: Sequence[str] = ()) -> list[str]:
    cols = ["alpha", "eps_meta", *extra]
    cols += [f"Q_{k}_{l}" for k in range(1, K + 1) for l in range(k, K + 1)]
    cols += [f"R_{k}_{n}" for k in range(1, K + 1) for n in range(1, M + 1)]
    cols += [f"rho_{k}_{n}" for k in range(1, K + 1) for n in range(1, M + 1)]
    return cols


def _state_values(params: OrderParams, rho: np.ndarray) -> list[float]:
    K = params.K
    iu = np.triu_indices(K)
    return [*params.Q[iu], *params.R.ravel(), *np.asarray(rho).ravel()]


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else format_number(v) for v in row))
    return "\n".join(lines) + "\n"


def _theory_rows(traj: Trajectory) -> list[list]:
    return [[a, e, *_state_values(s, r)]
            for a, e, s, r in zip(traj.alphas, traj.eps_meta, traj.states, traj.rho)]


def _sim_rows(traj: SimTrajectory) -> list[list]:
    return [[a, e, ee, em, *_state_values(s, r)]
            for a, e, ee, em, s, r in zip(traj.alphas, traj.eps_theory, traj.eps_empirical,
                                          traj.eps_ma, traj.states, traj.rho)]


SIM_EXTRA = ("eps_meta_empirical", "eps_meta_ma")


class _ArtifactWriter:
    """Single serializer for one experiment directory; tracks hashes."""

    def __init__(self, directory: Path):
        self.directory = directory
        directory.mkdir(parents=True, exist_ok=True)
        self.hashes: dict[str, str] = {}

    def write(self, filename: str, text: str) -> Path:
        path = self.directory / filename
        data = text.encode()
        path.write_bytes(data)
        self.hashes[filename] = hashlib.sha256(data).hexdigest()
        return path

    def manifest(self, config: ExperimentConfig, extra: dict) -> Path:
        doc = {"meta_lab_version": __version__, "backend": BACKEND, "config": config.to_dict(),
               "seeds": list(config.seeds), "artifacts": dict(sorted(self.hashes.items())), **extra}
        path = self.directory / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=False, default=_json_default) + "\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# units of work (top-level so they pickle for worker processes)

def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map; results are merged by index whatever the completion order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _theory_unit(args) -> Trajectory:
    run, plan = args
    init = run.init.resolve(run.model.K, run.model.M)
    return integrate(init, run.model, run.variant, plan, run.expansion)


def _sim_start(run: RunSpec, sim: SimulationSpec, seed: int):
    init_seed = seed if sim.init_seed is None else sim.init_seed
    if sim.init == "order-params":
        state = state_from_order_params(run.init.resolve(run.model.K, run.model.M),
                                        run.model.N, init_seed)
    else:
        state = init_sim(run.model, run.variant, init_seed, matched=sim.init == "matched",
                         q0=run.init.q0)
    return state.copy(seed=seed)


def _sim_unit(args) -> SimTrajectory:
    run, plan, sim, seed = args
    state = _sim_start(run, sim, seed)
    return run_stream(state, run.model, run.variant, plan.alpha_max, plan.record_every,
                      sim.ma_window, sim.n_tasks, sim.n_test)


@dataclass(frozen=True)
class SweepRow:
    K: int
    eta_J: float
    eta_w: float
    alpha_tilde: float | None
    eps_final: float
    failure: str | None = None


def _sweep_unit(args) -> SweepRow:
    model, variant, expansion, init, plan, threshold = args
    try:
        traj = integrate(init.resolve(model.K, model.M), model, variant, plan, expansion)
    except (ValueError, ArithmeticError) as exc:
        return SweepRow(model.K, model.eta_J, model.eta_w, None, math.nan, f"{type(exc).__name__}: {exc}")
    if not traj.completed:
        return SweepRow(model.K, model.eta_J, model.eta_w, None, math.nan, traj.failure)
    cross = first_crossing(traj, eps_threshold_config(threshold))
    return SweepRow(model.K, model.eta_J, model.eta_w, cross.alpha_tilde if cross.crossed else None,
                    float(traj.eps_meta[-1]))


def sweep_cells(config: ExperimentConfig) -> list[tuple]:
    """Work items in grid order: K outermost, then eta_J, then eta_w."""
    axes = dict(config.sweep.axes)
    Ks = axes.get("K", (config.model.K,))
    eJs = axes.get("eta_J", (config.model.eta_J,))
    eWs = axes.get("eta_w", (config.model.eta_w,))
    cells = []
    for K in Ks:
        for eJ in eJs:
            for eW in eWs:
                try:
                    m = config.model.with_(K=K, eta_J=eJ, eta_w=eW)
                except ValueError as exc:
                    raise ConfigError(f"sweep.axes: {exc}") from None
                cells.append((m, config.variant, config.expansion, config.init, config.plan,
                              config.sweep.threshold))
    return cells


def sweep(config: ExperimentConfig, jobs: int = 1) -> list[SweepRow]:
    """Integrate every grid cell independently; failures become sentinel rows."""
    if config.kind != "sweep":
        raise ConfigError(f"config.kind: sweep needs kind=sweep, got {config.kind!r}")
    return _map(_sweep_unit, sweep_cells(config), jobs)


SWEEP_HEADER = ("K", "eta_J", "eta_w", "alpha_tilde", "eps_final")


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    return _csv_text(SWEEP_HEADER, [[r.K, r.eta_J, r.eta_w, r.alpha_tilde, r.eps_final] for r in rows])


# ---------------------------------------------------------------------------
# integral validation

@dataclass(frozen=True)
class ValidationReport:
    count: int
    tolerance: float
    seed: int
    max_error: dict
    worst_case: dict

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_error.values())

    def csv(self) -> str:
        rows = [[k, self.count, self.max_error[k], self.tolerance] for k in KIND_DIMS]
        lines = ["kind,count,max_abs_error,tolerance,passed"]
        for k, n, err, tol in rows:
            lines.append(f"{k},{n},{format_number(err)},{format_number(tol)},{str(err <= tol).lower()}")
        return "\n".join(lines) + "\n"


def validate_integrals(seed: int = 0, count: int = 1000, tolerance: float = 1e-6) -> ValidationReport:
    """Compare every closed form with the quadrature oracle on random PSD covariances.

    Each kind draws ``count`` covariances from its own stream keyed by
    ``seed``, so the report is a pure function of its arguments.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    max_error, worst = {}, {}
    for j, (kind, dim) in enumerate(KIND_DIMS.items()):
        rng = stream(seed, "test", j)
        best = (-1.0, None)
        for _ in range(count):
            c = random_covariance(rng, dim)
            err = abs(closed_form(kind, c) - quadrature_oracle(kind, c))
            if err > best[0]:
                best = (err, c)
        max_error[kind] = best[0]
        worst[kind] = best[1].tolist()
    return ValidationReport(count, float(tolerance), seed, max_error, worst)


# ---------------------------------------------------------------------------
# compare

def _series_matrix(traj, eps_attr: str) -> np.ndarray:
    """Per-sample vector: eps then Q (k <= l) then R, used for the delta table."""
    K = traj.states[0].K
    iu = np.triu_indices(K)
    eps = getattr(traj, eps_attr)
    return np.array([[e, *s.Q[iu], *s.R.ravel()] for e, s in zip(eps, traj.states)])


def compare_table(theory: Trajectory, sims: Sequence[SimTrajectory]) -> tuple[list[str], list[list]]:
    """Per-alpha ``theory - simulator mean`` and the ensemble standard error.

    Only alphas reached by the theory and by every simulated run are listed.
    """
    K, M = theory.states[0].K, theory.states[0].M
    names = ["eps_meta"] + [f"Q_{k}_{l}" for k in range(1, K + 1) for l in range(k, K + 1)] \
        + [f"R_{k}_{n}" for k in range(1, K + 1) for n in range(1, M + 1)]
    n = min([len(theory.alphas)] + [len(s.alphas) for s in sims])
    th = _series_matrix(theory, "eps_meta")[:n]
    sim = np.stack([_series_matrix(s, "eps_theory")[:n] for s in sims])
    ma = np.stack([np.asarray(s.eps_ma[:n]) for s in sims])
    runs = len(sims)
    mean = sim.mean(axis=0)
    se = sim.std(axis=0, ddof=1) / math.sqrt(runs) if runs > 1 else np.full_like(mean, math.nan)
    ma_mean = ma.mean(axis=0)
    ma_se = ma.std(axis=0, ddof=1) / math.sqrt(runs) if runs > 1 else np.full(n, math.nan)
    header = ["alpha", "n_runs", "delta_eps_meta_ma", "se_eps_meta_ma"]
    for name in names:
        header += [f"delta_{name}", f"se_{name}"]
    rows = []
    for i in range(n):
        a_th, a_sim = theory.alphas[i], sims[0].alphas[i]
        if abs(a_th - a_sim) > 1e-9 * max(1.0, abs(a_th)):
            raise ConfigError(f"plan: theory and simulator grids disagree at index {i} "
                              f"({a_th!r} vs {a_sim!r}); choose record_every as a multiple of 1/N")
        row = [a_th, runs, th[i, 0] - ma_mean[i], ma_se[i]]
        for j in range(len(names)):
            row += [th[i, j] - mean[i, j], se[i, j]]
        rows.append(row)
    return header, rows


def _mean_start(sims: Sequence[SimTrajectory]) -> OrderParams:
    s0 = [s.states[0] for s in sims]
    return OrderParams(Q=np.mean([s.Q for s in s0], axis=0), R=np.mean([s.R for s in s0], axis=0),
                       T=np.mean([s.T for s in s0], axis=0))


def _theory_from(args) -> Trajectory:
    start, run, plan = args
    return integrate(start, run.model, run.variant, plan, run.expansion)


def _ensemble_rows(sims: Sequence[SimTrajectory]) -> tuple[list[str], list[list]]:
    K, M = sims[0].states[0].K, sims[0].states[0].M
    names = ["eps_meta", *SIM_EXTRA] + [f"Q_{k}_{l}" for k in range(1, K + 1) for l in range(k, K + 1)] \
        + [f"R_{k}_{n}" for k in range(1, K + 1) for n in range(1, M + 1)]
    n = min(len(s.alphas) for s in sims)
    iu = np.triu_indices(K)
    data = np.stack([np.array([[e, ee, em, *st.Q[iu], *st.R.ravel()]
                               for e, ee, em, st in zip(s.eps_theory, s.eps_empirical, s.eps_ma,
                                                        s.states)][:n]) for s in sims])
    mean = data.mean(axis=0)
    std = data.std(axis=0, ddof=1) if len(sims) > 1 else np.full_like(mean, math.nan)
    header = ["alpha", "n_runs"]
    for name in names:
        header += [f"mean_{name}", f"std_{name}"]
    rows = []
    for i in range(n):
        row = [sims[0].alphas[i], len(sims)]
        for j in range(len(names)):
            row += [mean[i, j], std[i, j]]
        rows.append(row)
    return header, rows


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class RunOutcome:
    """What :func:`run_experiment` wrote and how it went."""

    directory: Path
    artifacts: dict
    warnings: list = field(default_factory=list)
    numeric_failure: bool = False
    validation_failure: bool = False
    summary: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        if self.validation_failure:
            return 4
        if self.numeric_failure:
            return 3
        return 0


def _stem(run: RunSpec, config: ExperimentConfig) -> str:
    return "" if not config.runs else f"_{run.label}"


def run_experiment(config: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                   jobs: int = 1) -> RunOutcome:
    """Run ``config`` and write its artifacts under ``<out_dir>/<config.name>/``."""
    if jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {jobs}")
    base = Path(out_dir) if out_dir is not None else resolve_out_dir(None, config.output)
    writer = _ArtifactWriter(base / config.name)
    warnings_: list[str] = []
    summary: dict = {}
    numeric_failure = validation_failure = False
    runs = config.resolved_runs()

    if config.kind == "theory":
        trajs = _map(_theory_unit, [(r, config.plan) for r in runs], jobs)
        event = eps_threshold_config(config.sweep.threshold)
        for run, traj in zip(runs, trajs):
            K, M = run.model.K, run.model.M
            writer.write(f"theory{_stem(run, config)}.csv",
                         _csv_text(trajectory_header(K, M), _theory_rows(traj)))
            cross = first_crossing(traj, event)
            summary[run.label] = {"eps_final": float(traj.eps_meta[-1]),
                                  "alpha_final": float(traj.alphas[-1]),
                                  "alpha_tilde": cross.alpha_tilde, "completed": traj.completed}
            if not traj.completed:
                numeric_failure = True
                warnings_.append(f"{run.label}: partial trajectory ({traj.failure})")

    elif config.kind in ("simulate", "compare"):
        units = [(r, config.plan, config.simulation, s) for r in runs for s in config.seeds]
        results = _map(_sim_unit, units, jobs)
        per_run = {r.label: results[i * len(config.seeds):(i + 1) * len(config.seeds)]
                   for i, r in enumerate(runs)}
        for run in runs:
            sims = per_run[run.label]
            K, M = run.model.K, run.model.M
            for seed, traj in zip(config.seeds, sims):
                writer.write(f"sim{_stem(run, config)}_seed{seed}.csv",
                             _csv_text(trajectory_header(K, M, SIM_EXTRA), _sim_rows(traj)))
                if not traj.completed:
                    numeric_failure = True
                    warnings_.append(f"{run.label} seed {seed}: partial trajectory ({traj.failure})")
            header, rows = _ensemble_rows(sims)
            writer.write(f"sim{_stem(run, config)}_ensemble.csv", _csv_text(header, rows))
        if config.kind == "compare":
            theory_units = [(_mean_start(per_run[r.label]), r, config.plan) for r in runs]
            theories = _map(_theory_from, theory_units, jobs)
            for run, theory in zip(runs, theories):
                K, M = run.model.K, run.model.M
                writer.write(f"theory{_stem(run, config)}.csv",
                             _csv_text(trajectory_header(K, M), _theory_rows(theory)))
                header, rows = compare_table(theory, per_run[run.label])
                writer.write(f"compare{_stem(run, config)}.csv", _csv_text(header, rows))
                if not theory.completed:
                    numeric_failure = True
                    warnings_.append(f"{run.label} theory: partial trajectory ({theory.failure})")

    elif config.kind == "sweep":
        rows = sweep(config, jobs)
        writer.write("sweep.csv", sweep_csv(rows))
        failed = [r for r in rows if r.failure]
        for r in failed:
            warnings_.append(f"cell K={r.K}, eta_J={r.eta_J}, eta_w={r.eta_w}: {r.failure}")
        summary = {"cells": len(rows), "crossed": sum(r.alpha_tilde is not None for r in rows),
                   "failed": len(failed)}

    else:
        v = config.validation
        report = validate_integrals(v.seed, v.count, v.tolerance)
        writer.write("validation.csv", report.csv())
        summary = {"max_error": report.max_error, "passed": report.passed}
        validation_failure = not report.passed

    writer.manifest(config, {"warnings": warnings_, "summary": summary})
    return RunOutcome(writer.directory, dict(writer.hashes), warnings_, numeric_failure,
                      validation_failure, summary)
