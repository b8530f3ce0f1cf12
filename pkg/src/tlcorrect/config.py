"""Experiment configuration: presets, YAML parsing and scaling."""

from __future__ import annotations

import ast
import copy
import hashlib
import json
import math
import operator
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import nnet
from .correction import METHODS
from .dynsys import Domain, SystemSpecError, default_params, make_system
from .fml import TrainConfig

HF_FLOOR = 20
EPOCH_FLOOR = 200


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    count: int
    lag_steps: tuple = (1,)
    mode: str = "direct"
    horizon: float | None = None


@dataclass
class ArchSpec:
    hidden_layers: int = 3
    width: int = 50
    activation: str = "tanh"
    residual: bool = True


@dataclass
class CorrectionSpec:
    method: str = "tl-adam"
    split_index: int | None = None  # None: last layer (M)
    ridge: float = 0.0
    cold_start: bool = False
    training: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20_000))


@dataclass
class EvalSpec:
    n_traj: int = 100
    horizon: float = 100.0
    contain: bool = False
    example_x0: list | None = None


@dataclass
class ExperimentConfig:
    name: str
    true_system: dict
    prior_system: dict
    domain: Domain
    fine_step: float
    lf_data: DataSpec
    hf_data: DataSpec
    architecture: ArchSpec = field(default_factory=ArchSpec)
    prior_training: TrainConfig = field(default_factory=TrainConfig)
    correction: CorrectionSpec = field(default_factory=CorrectionSpec)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    substeps: int = 10
    seed: int = 0
    scale: float = 1.0

    def arch(self, dim: int) -> nnet.Architecture:
        a = self.architecture
        return nnet.Architecture(dim, a.hidden_layers, a.width, a.activation, a.residual)

    def split_index(self) -> int:
        s = self.correction.split_index
        return self.architecture.hidden_layers if s is None else s

    def systems(self):
        return (
            make_system(self.true_system["name"], self.true_system.get("params")),
            make_system(self.prior_system["name"], self.prior_system.get("params")),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = self.domain.to_dict()
        for spec in ("lf_data", "hf_data"):
            d[spec]["lag_steps"] = [int(v) for v in d[spec]["lag_steps"]]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# presets

PI = math.pi


def lag_range_steps(start: float, stop: float, step: float, fine_step: float) -> tuple:
    """Convert the lag times ``start, start+step, ..., stop`` into step counts."""
    n = int(round((stop - start) / step)) + 1
    return lag_times_to_steps([start + i * step for i in range(n)], fine_step)


def lag_times_to_steps(times, fine_step: float) -> tuple:
    out = []
    for t in times:
        k = int(round(t / fine_step))
        if k < 1 or abs(k * fine_step - t) > 1e-9 * max(abs(t), fine_step):
            raise ConfigError(f"lag {t} is not a positive multiple of the fine step {fine_step}")
        out.append(k)
    return tuple(sorted(set(out)))


def _coarse_training():
    return TrainConfig(epochs=10_000, batch_size=100, patience=1000)


def _presets() -> dict:
    pendulum = dict(
        true_system={"name": "damped-pendulum", "params": {"alpha": 0.1, "beta": 9.0}},
        prior_system={"name": "harmonic-oscillator", "params": {"beta": 9.0}},
    )
    metabolic = dict(
        true_system={"name": "metabolic", "params": {}},
        prior_system={"name": "metabolic-linearized", "params": {}},
        domain=Domain((0.0,) * 8, (1.0,) * 8),
    )
    # full-batch Adam; at lr 1e-3 the loss through 50-fold compositions diverges
    coarse_tl = CorrectionSpec("tl-recurrent", None, training=TrainConfig(epochs=5000, batch_size=500, lr=1e-4))
    return {
        "damped-pendulum": ExperimentConfig(
            name="damped-pendulum",
            domain=Domain((-PI, -2 * PI), (PI, 2 * PI)),
            fine_step=0.1,
            lf_data=DataSpec(30_000),
            hf_data=DataSpec(250),
            architecture=ArchSpec(3, 50),
            prior_training=TrainConfig(epochs=10_000),
            evaluation=EvalSpec(100, 100.0, contain=True, example_x0=[-1.615, -0.258]),
            **pendulum,
        ),
        "duffing": ExperimentConfig(
            name="duffing",
            true_system={"name": "duffing", "params": {"epsilon": 0.05}},
            prior_system={"name": "harmonic-oscillator", "params": {"beta": 1.0}},
            domain=Domain((0.0, 0.0), (3.0, 3.0)),
            fine_step=0.1,
            lf_data=DataSpec(30_000, mode="trajectory", horizon=12.0),
            hf_data=DataSpec(500, mode="trajectory", horizon=12.0),
            architecture=ArchSpec(3, 50),
            prior_training=TrainConfig(epochs=10_000),
            evaluation=EvalSpec(100, 100.0, example_x0=[0.233, -2.547]),
        ),
        "seir": ExperimentConfig(
            name="seir",
            true_system={"name": "seir", "params": {"mu": 0.1792, "beta": 0.8669, "sigma": 0.3562, "gamma": 0.2235}},
            prior_system={"name": "seir", "params": {"mu": 0.3, "beta": 0.9, "sigma": 0.5, "gamma": 0.2}},
            domain=Domain((0.0,) * 4, (1.0,) * 4, kind="simplex"),
            fine_step=0.2,
            lf_data=DataSpec(30_000, mode="trajectory", horizon=5.0),
            hf_data=DataSpec(250, mode="trajectory", horizon=5.0),
            architecture=ArchSpec(3, 50),
            prior_training=TrainConfig(epochs=10_000),
            evaluation=EvalSpec(100, 20.0, example_x0=[0.4208, 0.4224, 0.0592, 0.0976]),
        ),
        "metabolic": ExperimentConfig(
            name="metabolic",
            fine_step=0.05,
            lf_data=DataSpec(75_000, mode="trajectory", horizon=12.5),
            hf_data=DataSpec(750, mode="trajectory", horizon=12.5),
            architecture=ArchSpec(3, 80),
            prior_training=TrainConfig(epochs=20_000),
            evaluation=EvalSpec(100, 20.0, example_x0=[0.893, 0.851, 0.184, 0.651, 0.424, 0.342, 0.973, 0.932]),
            **metabolic,
        ),
        "damped-pendulum-coarse": ExperimentConfig(
            name="damped-pendulum-coarse",
            domain=Domain((-2 * PI, -PI), (2 * PI, PI)),
            fine_step=0.2,
            lf_data=DataSpec(50_000),
            hf_data=DataSpec(500, lag_range_steps(1.0, 10.0, 0.2, 0.2)),
            architecture=ArchSpec(5, 50),
            prior_training=_coarse_training(),
            correction=replace(coarse_tl, split_index=4),
            evaluation=EvalSpec(100, 100.0, contain=True, example_x0=[-0.242, -4.241]),
            **pendulum,
        ),
        "van-der-pol-coarse": ExperimentConfig(
            name="van-der-pol-coarse",
            true_system={"name": "van-der-pol", "params": {"mu": 1.0}},
            prior_system={"name": "van-der-pol", "params": {"mu": 0.5}},
            domain=Domain((-2.0, -1.5), (2.0, 1.5)),
            fine_step=0.2,
            lf_data=DataSpec(50_000, mode="trajectory", horizon=20.0),
            hf_data=DataSpec(500, lag_range_steps(1.0, 10.0, 0.2, 0.2)),
            architecture=ArchSpec(5, 50),
            prior_training=_coarse_training(),
            correction=replace(coarse_tl, split_index=4),
            evaluation=EvalSpec(100, 100.0, example_x0=[0.203, -0.924]),
        ),
        "dae-coarse": ExperimentConfig(
            name="dae-coarse",
            true_system={"name": "dae-circuit", "params": {}},
            prior_system={"name": "dae-circuit-cubic", "params": {}},
            domain=Domain((-2.0, -0.2), (2.0, 0.2)),
            fine_step=5e-9,
            lf_data=DataSpec(60_000, mode="trajectory", horizon=5e-7),
            hf_data=DataSpec(500, lag_range_steps(2.5e-8, 1.5e-7, 5e-9, 5e-9)),
            architecture=ArchSpec(5, 50),
            prior_training=_coarse_training(),
            correction=replace(coarse_tl, split_index=4),
            evaluation=EvalSpec(100, 2.5e-6, example_x0=[-0.111, 0.148]),
        ),
        "metabolic-coarse": ExperimentConfig(
            name="metabolic-coarse",
            fine_step=0.2,
            lf_data=DataSpec(60_000, mode="trajectory", horizon=20.0),
            hf_data=DataSpec(500, lag_range_steps(1.0, 10.0, 0.2, 0.2)),
            architecture=ArchSpec(5, 50),
            prior_training=_coarse_training(),
            correction=replace(coarse_tl, split_index=4),
            evaluation=EvalSpec(100, 25.0),
            **metabolic,
        ),
    }


PRESETS = _presets()


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[name])


# ---------------------------------------------------------------------------
# scaling

def scaled(cfg: ExperimentConfig, scale: float | None = None) -> ExperimentConfig:
    """Shrink data counts and prior epochs by ``scale`` (floors apply).

    High-fidelity counts never drop below ``HF_FLOOR`` and epochs never below
    ``EPOCH_FLOOR``. Correction epochs are left alone: they are cheap.
    """
    s = cfg.scale if scale is None else scale
    if not 0 < s <= 1:
        raise ConfigError(f"scale must lie in (0, 1], got {s}")
    out = copy.deepcopy(cfg)
    out.scale = s
    if s == 1.0:
        return out
    out.lf_data.count = max(1, int(round(cfg.lf_data.count * s)))
    out.hf_data.count = max(HF_FLOOR, int(round(cfg.hf_data.count * s)))
    ep = max(EPOCH_FLOOR, int(round(cfg.prior_training.epochs * s)))
    out.prior_training = replace(cfg.prior_training, epochs=ep)
    return out


# ---------------------------------------------------------------------------
# parsing

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.Pow: operator.pow}


def _eval_number(expr: str) -> float:
    """Evaluate arithmetic on numbers and ``pi``."""

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        raise ValueError(expr)

    return ev(ast.parse(expr, mode="eval"))


class _Reader:
    """Walks a YAML node tree, tracking line numbers for error messages."""

    def __init__(self, source: str):
        self.source = source

    def where(self, node, path) -> str:
        line = node.start_mark.line + 1 if node is not None else "?"
        return f"{self.source}:{line}: {'.'.join(path) or '<root>'}"

    def mapping(self, node, path, allowed) -> dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{self.where(node, path)}: expected a mapping")
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            if key not in allowed:
                raise ConfigError(
                    f"{self.where(key_node, path + [key])}: unknown key {key!r} "
                    f"(allowed: {', '.join(sorted(allowed))})"
                )
            if key in out:
                raise ConfigError(f"{self.where(key_node, path + [key])}: duplicate key")
            out[key] = value_node
        return out

    def scalar(self, node, path):
        if not isinstance(node, yaml.ScalarNode):
            raise ConfigError(f"{self.where(node, path)}: expected a scalar")
        return yaml.safe_load(yaml.serialize(node))

    def number(self, node, path) -> float:
        v = self.scalar(node, path)
        if isinstance(v, bool):
            raise ConfigError(f"{self.where(node, path)}: expected a number, got {v!r}")
        if isinstance(v, (int, float)):
            return float(v)
        try:
            return _eval_number(str(v))
        except (ValueError, SyntaxError, ZeroDivisionError):
            raise ConfigError(f"{self.where(node, path)}: expected a number, got {v!r}") from None

    def integer(self, node, path, minimum=None) -> int:
        v = self.scalar(node, path)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{self.where(node, path)}: expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise ConfigError(f"{self.where(node, path)}: must be >= {minimum}, got {v}")
        return v

    def boolean(self, node, path) -> bool:
        v = self.scalar(node, path)
        if not isinstance(v, bool):
            raise ConfigError(f"{self.where(node, path)}: expected true/false, got {v!r}")
        return v

    def string(self, node, path) -> str:
        v = self.scalar(node, path)
        if not isinstance(v, str):
            raise ConfigError(f"{self.where(node, path)}: expected a string, got {v!r}")
        return v

    def seq(self, node, path) -> list:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{self.where(node, path)}: expected a list")
        return node.value


_TRAIN_KEYS = {"epochs", "batch_size", "lr", "patience", "shuffle", "holdout_fraction"}


def _read_training(r: _Reader, node, path, base: TrainConfig, extra=frozenset()) -> tuple[TrainConfig, dict]:
    m = r.mapping(node, path, _TRAIN_KEYS | set(extra))
    kw = {}
    for key in ("epochs", "batch_size"):
        if key in m:
            kw[key] = r.integer(m[key], path + [key], minimum=1 if key == "batch_size" else 0)
    if "lr" in m:
        kw["lr"] = r.number(m["lr"], path + ["lr"])
        if not kw["lr"] > 0:
            raise ConfigError(f"{r.where(m['lr'], path + ['lr'])}: learning rate must be positive")
    if "patience" in m:
        v = r.scalar(m["patience"], path + ["patience"])
        kw["patience"] = None if v is None else r.integer(m["patience"], path + ["patience"], minimum=1)
    if "shuffle" in m:
        kw["shuffle"] = r.boolean(m["shuffle"], path + ["shuffle"])
    if "holdout_fraction" in m:
        f = r.number(m["holdout_fraction"], path + ["holdout_fraction"])
        if not 0 < f < 1:
            raise ConfigError(f"{r.where(m['holdout_fraction'], path + ['holdout_fraction'])}: must lie in (0, 1)")
        kw["holdout_fraction"] = f
    rest = {k: v for k, v in m.items() if k in extra}
    return replace(base, **kw), rest


def _read_system(r, node, path, base):
    m = r.mapping(node, path, {"name", "params"})
    name = r.string(m["name"], path + ["name"]) if "name" in m else (base or {}).get("name")
    if name is None:
        raise ConfigError(f"{r.where(node, path)}: missing required field 'name'")
    params = dict((base or {}).get("params", {})) if base and base.get("name") == name else {}
    if "params" in m:
        pm = m["params"]
        try:
            allowed = set(default_params(name))
        except SystemSpecError as exc:
            raise ConfigError(f"{r.where(m.get('name', node), path + ['name'])}: {exc}") from None
        for k, v in r.mapping(pm, path + ["params"], allowed).items():
            params[k] = r.number(v, path + ["params", k])
    try:
        make_system(name, params)
    except SystemSpecError as exc:
        raise ConfigError(f"{r.where(node, path)}: {exc}") from None
    return {"name": name, "params": params}


def _read_data(r, node, path, base: DataSpec | None, fine_step: float) -> DataSpec:
    m = r.mapping(node, path, {"count", "lag_steps", "lag_times", "mode", "horizon"})
    spec = copy.deepcopy(base) if base else DataSpec(count=0)
    if "count" in m:
        spec.count = r.integer(m["count"], path + ["count"], minimum=0)
    elif base is None:
        raise ConfigError(f"{r.where(node, path)}: missing required field 'count'")
    if "lag_steps" in m and "lag_times" in m:
        raise ConfigError(f"{r.where(m['lag_times'], path + ['lag_times'])}: give lag_steps or lag_times, not both")
    if "lag_steps" in m:
        n = m["lag_steps"]
        if isinstance(n, yaml.SequenceNode):
            steps = [r.integer(v, path + ["lag_steps"], minimum=1) for v in n.value]
        else:
            steps = [r.integer(n, path + ["lag_steps"], minimum=1)]
        spec.lag_steps = tuple(sorted(set(steps)))
    if "lag_times" in m:
        n = m["lag_times"]
        try:
            if isinstance(n, yaml.MappingNode):
                rm = r.mapping(n, path + ["lag_times"], {"start", "stop", "step"})
                missing = {"start", "stop", "step"} - set(rm)
                if missing:
                    raise ConfigError(f"{r.where(n, path + ['lag_times'])}: missing {sorted(missing)}")
                vals = [r.number(rm[k], path + ["lag_times", k]) for k in ("start", "stop", "step")]
                spec.lag_steps = lag_range_steps(*vals, fine_step)
            else:
                times = [r.number(v, path + ["lag_times"]) for v in r.seq(n, path + ["lag_times"])]
                spec.lag_steps = lag_times_to_steps(times, fine_step)
        except ConfigError as exc:
            if str(exc).startswith(r.source):
                raise
            raise ConfigError(f"{r.where(n, path + ['lag_times'])}: {exc}") from None
    if "mode" in m:
        spec.mode = r.string(m["mode"], path + ["mode"])
        if spec.mode not in ("direct", "trajectory"):
            raise ConfigError(f"{r.where(m['mode'], path + ['mode'])}: mode must be 'direct' or 'trajectory'")
    if "horizon" in m:
        spec.horizon = r.number(m["horizon"], path + ["horizon"])
    if spec.mode == "trajectory" and spec.horizon is None:
        raise ConfigError(f"{r.where(node, path)}: trajectory mode needs a horizon")
    return spec


_TOP_KEYS = {
    "preset", "name", "seed", "scale", "true_system", "prior_system", "domain", "fine_step", "substeps",
    "lf_data", "hf_data", "architecture", "prior_training", "correction", "evaluation",
}


def parse_config_text(text: str, source: str = "<config>", default_preset: str | None = None) -> ExperimentConfig:
    """Parse YAML config text; unknown keys and bad values raise ``ConfigError``
    with the file and line number. Fields not given fall back to ``preset``
    (or ``default_preset``) when one is named."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    r = _Reader(source)
    if root is None:
        if default_preset is None:
            raise ConfigError(f"{source}: empty config")
        return preset(default_preset)
    m = r.mapping(root, [], _TOP_KEYS)
    if "preset" in m:
        name_ = r.string(m["preset"], ["preset"])
        if default_preset is not None and name_ != default_preset:
            raise ConfigError(f"{r.where(m['preset'], ['preset'])}: config names preset {name_!r} "
                              f"but {default_preset!r} was requested")
        try:
            base = preset(name_)
        except ConfigError as exc:
            raise ConfigError(f"{r.where(m['preset'], ['preset'])}: {exc}") from None
    else:
        base = preset(default_preset) if default_preset else None
    if base is None:
        for key in ("true_system", "prior_system", "domain", "fine_step", "lf_data", "hf_data"):
            if key not in m:
                raise ConfigError(f"{r.where(root, [])}: missing required field {key!r} (or give a preset)")

    name = r.string(m["name"], ["name"]) if "name" in m else (base.name if base else "experiment")
    fine_step = r.number(m["fine_step"], ["fine_step"]) if "fine_step" in m else base.fine_step
    if not fine_step > 0:
        raise ConfigError(f"{r.where(m.get('fine_step'), ['fine_step'])}: must be positive")
    true_sys = _read_system(r, m["true_system"], ["true_system"], base and base.true_system) \
        if "true_system" in m else base.true_system
    prior_sys = _read_system(r, m["prior_system"], ["prior_system"], base and base.prior_system) \
        if "prior_system" in m else base.prior_system

    if "domain" in m:
        dm = r.mapping(m["domain"], ["domain"], {"lower", "upper", "kind"})
        bd = base.domain if base else None
        lower = [r.number(v, ["domain", "lower"]) for v in r.seq(dm["lower"], ["domain", "lower"])] \
            if "lower" in dm else (list(bd.lower) if bd else None)
        upper = [r.number(v, ["domain", "upper"]) for v in r.seq(dm["upper"], ["domain", "upper"])] \
            if "upper" in dm else (list(bd.upper) if bd else None)
        kind = r.string(dm["kind"], ["domain", "kind"]) if "kind" in dm else (bd.kind if bd else "box")
        if lower is None or upper is None:
            raise ConfigError(f"{r.where(m['domain'], ['domain'])}: domain needs lower and upper")
        try:
            domain = Domain(tuple(lower), tuple(upper), kind)
        except SystemSpecError as exc:
            raise ConfigError(f"{r.where(m['domain'], ['domain'])}: {exc}") from None
    else:
        domain = base.domain

    lf = _read_data(r, m["lf_data"], ["lf_data"], base and base.lf_data, fine_step) \
        if "lf_data" in m else copy.deepcopy(base.lf_data)
    hf = _read_data(r, m["hf_data"], ["hf_data"], base and base.hf_data, fine_step) \
        if "hf_data" in m else copy.deepcopy(base.hf_data)
    if len(lf.lag_steps) != 1:
        raise ConfigError(f"{r.where(m.get('lf_data'), ['lf_data', 'lag_steps'])}: prior data needs a single lag")

    arch = copy.deepcopy(base.architecture) if base else ArchSpec()
    if "architecture" in m:
        am = r.mapping(m["architecture"], ["architecture"], {"hidden_layers", "width", "activation", "residual"})
        if "hidden_layers" in am:
            arch.hidden_layers = r.integer(am["hidden_layers"], ["architecture", "hidden_layers"], minimum=1)
        if "width" in am:
            arch.width = r.integer(am["width"], ["architecture", "width"], minimum=1)
        if "activation" in am:
            arch.activation = r.string(am["activation"], ["architecture", "activation"])
            try:
                nnet.Architecture(1, 1, 1, arch.activation)
            except nnet.ShapeError as exc:
                raise ConfigError(f"{r.where(am['activation'], ['architecture', 'activation'])}: {exc}") from None
        if "residual" in am:
            arch.residual = r.boolean(am["residual"], ["architecture", "residual"])

    prior_tr = base.prior_training if base else TrainConfig()
    if "prior_training" in m:
        prior_tr, _ = _read_training(r, m["prior_training"], ["prior_training"], prior_tr)

    corr = copy.deepcopy(base.correction) if base else CorrectionSpec()
    corr_node = m.get("correction")
    if corr_node is not None:
        tr, rest = _read_training(r, corr_node, ["correction"], corr.training,
                                  extra={"method", "split_index", "ridge", "cold_start"})
        corr.training = tr
        if "method" in rest:
            corr.method = r.string(rest["method"], ["correction", "method"])
            if corr.method not in METHODS:
                raise ConfigError(f"{r.where(rest['method'], ['correction', 'method'])}: "
                                  f"method must be one of {', '.join(METHODS)}")
        if "split_index" in rest:
            corr.split_index = r.integer(rest["split_index"], ["correction", "split_index"], minimum=0)
        if "ridge" in rest:
            corr.ridge = r.number(rest["ridge"], ["correction", "ridge"])
            if corr.ridge < 0:
                raise ConfigError(f"{r.where(rest['ridge'], ['correction', 'ridge'])}: ridge must be >= 0")
        if "cold_start" in rest:
            corr.cold_start = r.boolean(rest["cold_start"], ["correction", "cold_start"])

    ev = copy.deepcopy(base.evaluation) if base else EvalSpec()
    if "evaluation" in m:
        em = r.mapping(m["evaluation"], ["evaluation"], {"n_traj", "horizon", "contain", "example_x0"})
        if "n_traj" in em:
            ev.n_traj = r.integer(em["n_traj"], ["evaluation", "n_traj"], minimum=1)
        if "horizon" in em:
            ev.horizon = r.number(em["horizon"], ["evaluation", "horizon"])
        if "contain" in em:
            ev.contain = r.boolean(em["contain"], ["evaluation", "contain"])
        if "example_x0" in em:
            ev.example_x0 = [r.number(v, ["evaluation", "example_x0"])
                             for v in r.seq(em["example_x0"], ["evaluation", "example_x0"])]

    seed = r.integer(m["seed"], ["seed"], minimum=0) if "seed" in m else (base.seed if base else 0)
    scale = r.number(m["scale"], ["scale"]) if "scale" in m else (base.scale if base else 1.0)
    substeps = r.integer(m["substeps"], ["substeps"], minimum=1) if "substeps" in m else \
        (base.substeps if base else 10)

    cfg = ExperimentConfig(name, true_sys, prior_sys, domain, fine_step, lf, hf, arch, prior_tr, corr, ev,
                           substeps, seed, scale)
    try:
        validate(cfg)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def parse_config(path, default_preset: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path), default_preset)


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks that apply to any config, preset-derived or not."""
    if not 0 < cfg.scale <= 1:
        raise ConfigError(f"scale: must lie in (0, 1], got {cfg.scale}")
    true_sys, prior_sys = cfg.systems()
    if true_sys.dim != prior_sys.dim:
        raise ConfigError("true_system/prior_system: state dimensions differ")
    if cfg.domain.dim not in (true_sys.dim, true_sys.diff_dim):
        raise ConfigError(f"domain: has {cfg.domain.dim} components, system has {true_sys.dim}")
    M = cfg.architecture.hidden_layers
    ell = cfg.split_index()
    if not 0 <= ell <= M:
        raise ConfigError(f"correction.split_index: {ell} outside [0, {M}]")
    method = cfg.correction.method
    if max(cfg.hf_data.lag_steps) > 1 and method != "tl-recurrent":
        raise ConfigError(
            f"correction.method: high-fidelity lags up to {max(cfg.hf_data.lag_steps)} steps "
            f"need method tl-recurrent, not {method}"
        )
    if method == "tl-lsq" and ell != M:
        raise ConfigError(f"correction.split_index: tl-lsq retrains only the output layer (split_index {M})")
    if method == "gresnet" and cfg.hf_data.lag_steps != (1,):
        raise ConfigError("correction.method: gresnet needs one-step pairs")
    n_steps = cfg.evaluation.horizon / cfg.fine_step
    if abs(n_steps - round(n_steps)) > 1e-9 * max(n_steps, 1):
        raise ConfigError("evaluation.horizon: must be a multiple of fine_step")
    if cfg.evaluation.example_x0 is not None and len(cfg.evaluation.example_x0) not in (
        true_sys.dim, true_sys.diff_dim
    ):
        raise ConfigError("evaluation.example_x0: wrong number of components")
    for spec_name in ("lf_data", "hf_data"):
        spec = getattr(cfg, spec_name)
        if spec.mode == "trajectory" and (spec.horizon is None or
                                          spec.horizon / cfg.fine_step < max(spec.lag_steps) - 1e-9):
            raise ConfigError(f"{spec_name}.horizon: shorter than the largest lag")


def derive_seed(master: int, label: str) -> int:
    """Stable per-stage seed from the master seed and a label."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def lag_steps_array(spec: DataSpec) -> np.ndarray:
    return np.asarray(spec.lag_steps, dtype=np.int64)
