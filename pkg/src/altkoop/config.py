"""Experiment configuration read from sectioned ``key = value`` files.

Every key is validated up front and unknown sections or keys are rejected,
so a typo fails before any computation starts. Missing keys take defaults
that depend on the system kind (see :func:`system_defaults`).
"""

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Tuple

from . import activations, dynamics, objective, trainer
from .distributed import DELAY_DISTRIBUTIONS
from .errors import UsageError

MODES = ("central", "dist-sync", "dist-async")
RECIPES = ("vdp", "glyco")

_PARAM_KEYS = {
    "vdp": ("mu",),
    "glycolysis": ("j_flux", "a", "n", "k1_cap", "kappa", "phi", "q_exp", "k", "k1", "k2",
                   "k3", "k4", "k5", "k6"),
}
_PARAM_FIELD = {"j_flux": "J_flux"}


@dataclass(frozen=True)
class SystemSpec:
    kind: str = "vdp"
    params: Tuple[Tuple[str, float], ...] = ()
    x0: Tuple[float, ...] = dynamics.DEFAULT_X0["vdp"]
    dt: float = dynamics.DEFAULT_DT["vdp"]
    samples: int = 600

    def build(self):
        kwargs = {_PARAM_FIELD.get(k, k): v for k, v in self.params}
        return dynamics.SYSTEMS[self.kind](**kwargs)


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 400
    n_predict: int = 200


@dataclass(frozen=True)
class DictionarySpec:
    widths: Tuple[int, ...] = (3,)
    activation: str = "tanh"
    augment_state: bool = True
    normalize: bool = False


@dataclass(frozen=True)
class TrainingSpec:
    mode: str = "central"
    schedule: str = "constant"
    eta: float = 0.23
    eta_w: Optional[float] = None
    eta_k: Optional[float] = None
    scale: float = 1.0
    iterations: int = 500
    tol: float = 1e-8
    seed: int = 0
    gradient: str = "full"
    tracker: str = "best"
    u_k: float = 4.0
    u_w: float = 4.0
    project: bool = False

    def schedule_obj(self):
        if self.schedule == "constant":
            return trainer.Schedule("constant", eta=self.eta, eta_w=self.eta_w, eta_k=self.eta_k)
        if self.schedule == "auto":
            return trainer.Schedule.auto(self.scale)
        return trainer.Schedule.diminishing()

    def train_config(self):
        return trainer.TrainConfig(
            iterations=self.iterations, tol=self.tol, schedule=self.schedule_obj(),
            gradient=self.gradient, tracker=self.tracker,
            bounds=objective.BoundConfig(self.u_k, self.u_w, self.project),
        )


@dataclass(frozen=True)
class DistributedSpec:
    q: int = 1
    block_widths: Optional[Tuple[int, ...]] = None
    max_delay: int = 0
    delay_dist: str = "uniform"
    batch_size: Optional[int] = None


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    trajectory: str = "trajectory.csv"
    model: str = "model.json"
    history: str = "history.csv"
    rounds: str = "rounds.csv"
    prediction: str = "prediction.csv"


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSpec = field(default_factory=SystemSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dictionary: DictionarySpec = field(default_factory=DictionarySpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    distributed: DistributedSpec = field(default_factory=DistributedSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def replace(self, section, **changes):
        """Copy with ``changes`` applied to one section, re-validated."""
        new = dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})
        validate(new)
        return new

    def to_text(self, include_output=True):
        """Canonical text form; parsing it gives back an equal config."""
        lines = []
        for name in _SECTIONS:
            if name == "output" and not include_output:
                continue
            lines.append(f"[{name}]")
            sec = getattr(self, name)
            for f in dataclasses.fields(sec):
                value = getattr(sec, f.name)
                if name == "system" and f.name == "params":
                    for k, v in value:
                        lines.append(f"{k} = {v!r}")
                    continue
                if value is None:
                    continue
                lines.append(f"{f.name} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        """SHA-256 of the canonical text without output paths."""
        return hashlib.sha256(self.to_text(include_output=False).encode("utf-8")).hexdigest()


_SECTIONS = ("system", "dataset", "dictionary", "training", "distributed", "output")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def system_defaults(kind):
    """Defaults that depend on the system kind."""
    if kind not in dynamics.SYSTEMS:
        raise UsageError(f"system.kind: unknown system {kind!r}; expected one of {sorted(dynamics.SYSTEMS)}")
    if kind == "vdp":
        return dict(x0=dynamics.DEFAULT_X0["vdp"], dt=dynamics.DEFAULT_DT["vdp"], samples=600,
                    n_train=400, n_predict=200)
    return dict(x0=dynamics.DEFAULT_X0["glycolysis"], dt=dynamics.DEFAULT_DT["glycolysis"],
                samples=1000, n_train=600, n_predict=400)


def default_config(kind="vdp"):
    sd = system_defaults(kind)
    cfg = ExperimentConfig(
        system=SystemSpec(kind, (), tuple(sd["x0"]), sd["dt"], sd["samples"]),
        dataset=DatasetSpec(sd["n_train"], sd["n_predict"]),
    )
    validate(cfg)
    return cfg


# -- parsing -----------------------------------------------------------------------


def _parse_value(where, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind == "opt_int":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "opt_float":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "opt_ints":
            return None if raw.lower() in ("", "none") else tuple(
                int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise UsageError(f"{where}: cannot parse {raw!r}") from None


_KINDS = {
    "system": {"kind": str, "x0": "floats", "dt": float, "samples": int},
    "dataset": {"n_train": int, "n_predict": int},
    "dictionary": {"widths": "ints", "activation": str, "augment_state": bool, "normalize": bool},
    "training": {"mode": str, "schedule": str, "eta": float, "eta_w": "opt_float",
                 "eta_k": "opt_float", "scale": float, "iterations": int, "tol": float,
                 "seed": int, "gradient": str, "tracker": str, "u_k": float, "u_w": float,
                 "project": bool},
    "distributed": {"q": int, "block_widths": "opt_ints", "max_delay": int, "delay_dist": str,
                    "batch_size": "opt_int"},
    "output": {"dir": str, "trajectory": str, "model": str, "history": str, "rounds": str,
               "prediction": str},
}


def parse_text(text, source="<config>"):
    """Parse configuration text into a validated :class:`ExperimentConfig`."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise UsageError(f"{source}: {exc}") from None
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise UsageError(f"{source}: unknown section [{sec}]")

    kind = cp.get("system", "kind", fallback="vdp").strip()
    base = default_config(kind)
    values = {}
    for sec in _SECTIONS:
        if not cp.has_section(sec):
            continue
        allowed = dict(_KINDS[sec])
        if sec == "system":
            allowed.update({k: float for k in _PARAM_KEYS[kind]})
        changes, params = {}, []
        for key, raw in cp.items(sec):
            if key not in allowed:
                raise UsageError(f"{source}: unknown key {sec}.{key}")
            value = _parse_value(f"{sec}.{key}", raw, allowed[key])
            if sec == "system" and key in _PARAM_KEYS[kind]:
                params.append((key, value))
            else:
                changes[key] = value
        if params:
            changes["params"] = tuple(sorted(params))
        values[sec] = dataclasses.replace(getattr(base, sec), **changes)
    cfg = dataclasses.replace(base, **values)
    validate(cfg)
    return cfg


def load(path):
    """Read a config file, or a bundled recipe when ``path`` names one."""
    p = Path(path)
    if p.is_file():
        return parse_text(p.read_text(encoding="utf-8"), str(p))
    name = str(path)[:-4] if str(path).endswith(".cfg") else str(path)
    if name in RECIPES:
        return recipe(name)
    raise UsageError(f"config file not found: {path}")


def recipe_text(name):
    if name not in RECIPES:
        raise UsageError(f"unknown recipe {name!r}; bundled recipes are {RECIPES}")
    return resources.files("altkoop").joinpath("recipes").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def recipe(name):
    """A bundled recipe as a config."""
    return parse_text(recipe_text(name), f"{name}.cfg")


# -- validation --------------------------------------------------------------------


def _require(cond, where, msg):
    if not cond:
        raise UsageError(f"{where}: {msg}")


def _finite_pos(value, where):
    _require(isinstance(value, (int, float)) and math.isfinite(value) and value > 0, where,
             f"must be a positive finite number, got {value!r}")


def validate(cfg):
    s, ds, dc, tr, di = cfg.system, cfg.dataset, cfg.dictionary, cfg.training, cfg.distributed
    _require(s.kind in dynamics.SYSTEMS, "system.kind", f"unknown system {s.kind!r}")
    system = s.build()
    _require(len(s.x0) == system.d, "system.x0", f"needs {system.d} values, got {len(s.x0)}")
    _require(all(math.isfinite(v) for v in s.x0), "system.x0", "values must be finite")
    for k, v in s.params:
        _require(math.isfinite(v), f"system.{k}", "must be finite")
    _finite_pos(s.dt, "system.dt")
    _require(s.samples >= 1, "system.samples", "must be at least 1")

    _require(ds.n_train >= 1, "dataset.n_train", "must be at least 1")
    _require(ds.n_predict >= 0, "dataset.n_predict", "must be non-negative")
    _require(ds.n_train + ds.n_predict <= s.samples, "dataset",
             f"n_train + n_predict = {ds.n_train + ds.n_predict} exceeds system.samples = {s.samples}")

    _require(len(dc.widths) >= 1 and all(w >= 1 for w in dc.widths), "dictionary.widths",
             "needs one or more positive layer widths")
    try:
        activations.ActivationKind.parse(dc.activation)
    except UsageError:
        raise UsageError(f"dictionary.activation: unknown activation {dc.activation!r}; "
                         f"expected one of {[k.value for k in activations.ActivationKind]}") from None

    _require(tr.mode in MODES, "training.mode", f"must be one of {MODES}, got {tr.mode!r}")
    _require(tr.schedule in trainer.SCHEDULES, "training.schedule",
             f"must be one of {trainer.SCHEDULES}, got {tr.schedule!r}")
    if tr.schedule == "constant":
        _finite_pos(tr.eta, "training.eta")
    for name in ("eta_w", "eta_k"):
        if getattr(tr, name) is not None:
            _finite_pos(getattr(tr, name), f"training.{name}")
    _finite_pos(tr.scale, "training.scale")
    _require(tr.iterations >= 0, "training.iterations", "must be non-negative")
    _require(tr.tol >= 0, "training.tol", "must be non-negative")
    _require(tr.seed >= 0, "training.seed", "must be non-negative")
    _require(tr.gradient in objective.GRADIENT_MODES, "training.gradient",
             f"must be one of {objective.GRADIENT_MODES}, got {tr.gradient!r}")
    _require(tr.tracker in trainer.TRACKERS, "training.tracker",
             f"must be one of {trainer.TRACKERS}, got {tr.tracker!r}")
    _finite_pos(tr.u_k, "training.u_k")
    _finite_pos(tr.u_w, "training.u_w")
    if tr.schedule == "auto":
        _require(len(dc.widths) == 1, "training.schedule", "auto requires a single-layer dictionary")

    _require(1 <= di.q <= system.d, "distributed.q", f"must be between 1 and {system.d}, got {di.q}")
    if di.block_widths is not None:
        _require(len(di.block_widths) in (1, di.q), "distributed.block_widths",
                 f"needs 1 or {di.q} values, got {len(di.block_widths)}")
        _require(all(w >= 1 for w in di.block_widths), "distributed.block_widths",
                 "widths must be positive")
    _require(di.max_delay >= 0, "distributed.max_delay", "must be non-negative")
    _require(di.delay_dist in DELAY_DISTRIBUTIONS, "distributed.delay_dist",
             f"must be one of {DELAY_DISTRIBUTIONS}, got {di.delay_dist!r}")
    _require(di.batch_size is None or di.batch_size >= 1, "distributed.batch_size",
             "must be positive")
    for f in dataclasses.fields(cfg.output):
        _require(bool(getattr(cfg.output, f.name)), f"output.{f.name}", "must not be empty")
    return cfg
