"""Experiment configuration: a sectioned key-value text file with strict keys.

Every key lives in a section and is addressed as ``section.key`` (the same
names the command line accepts as ``--section.key VALUE``). Unknown sections
or keys are rejected, as are values outside what the consuming code accepts.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .backbone import FTR, LTR, PER, TS, ModelConfig
from .errors import ConfigError, ContractError
from .losses import DistillConfig
from .routing import CTASchedule
from .teachers import KINDS


@dataclass(frozen=True)
class ModelSection:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    dim: int = 32
    heads: int = 2
    mlp_ratio: int = 4
    n_plain: int = 4
    n_moe: int = 3
    n_experts: int = 6
    top_k: int = 2
    gate_hidden: int = 4
    router_hidden: int = 32
    router_dropout: float = 0.1
    tau: float = 1.0


@dataclass(frozen=True)
class TeachersSection:
    kinds: tuple = ("mixing", "local", "global")
    dims: tuple = (32, 32, 32)


@dataclass(frozen=True)
class LossSection:
    alpha: tuple = ()  # empty -> equal weights
    beta: float = 0.9
    gamma: float = 0.0005
    delta: float = 1.0


@dataclass(frozen=True)
class DistillSection:
    steps: int = 2000
    batch_size: int = 8
    peak_lr: float = 0.002
    warmup_fraction: float = 0.1
    constant_fraction: float = 0.4


@dataclass(frozen=True)
class RoutingSection:
    strategy: str = "per"  # ts0..ts{I-1}, ftr, ltr, per
    cta: bool = False
    k: int = 0  # 0 -> the model's top_k
    k_min: int = 2
    horizon: int = 0  # 0 -> half the finetuning steps


@dataclass(frozen=True)
class FinetuneSection:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 0.003
    router_lr_scale: float = 0.1
    schedule: str = "constant"  # or "cosine": the distillation-style schedule
    n_dfm: int = 6
    n_tfs: int = 0


@dataclass(frozen=True)
class TaskSection:
    relevant_teacher: int = 1
    n_relevant: int = 6
    target_dim: int = 2
    specific_components: int = 7
    threshold: float = 0.5
    n_eval: int = 256


@dataclass(frozen=True)
class AnalysisSection:
    enabled: bool = False
    fraction: float = 0.3
    pool_size: int = 2000
    n_components: int = 5
    k: int = 3


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    seeds: int = 5
    out_dir: str = "runs"
    source_seed: int = 0  # seed of the synthetic image source and teachers


_SECTIONS = {
    "model": ModelSection,
    "teachers": TeachersSection,
    "loss": LossSection,
    "distill": DistillSection,
    "routing": RoutingSection,
    "finetune": FinetuneSection,
    "task": TaskSection,
    "analysis": AnalysisSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    teachers: TeachersSection = field(default_factory=TeachersSection)
    loss: LossSection = field(default_factory=LossSection)
    distill: DistillSection = field(default_factory=DistillSection)
    routing: RoutingSection = field(default_factory=RoutingSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    task: TaskSection = field(default_factory=TaskSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        validate(self)

    # -- derived objects for the consuming modules

    def model_config(self):
        m = self.model
        return ModelConfig(image_size=m.image_size, channels=m.channels, patch_size=m.patch_size, dim=m.dim,
                           heads=m.heads, mlp_ratio=m.mlp_ratio, n_plain=m.n_plain, n_moe=m.n_moe,
                           n_experts=m.n_experts, top_k=m.top_k, n_teachers=len(self.teachers.kinds),
                           teacher_dims=tuple(self.teachers.dims), gate_hidden=m.gate_hidden,
                           router_hidden=m.router_hidden, router_dropout=m.router_dropout, tau=m.tau)

    def distill_config(self):
        lo = self.loss
        return DistillConfig(alpha=tuple(lo.alpha) or None, beta=lo.beta, gamma=lo.gamma, delta=lo.delta)

    def strategy(self):
        return parse_strategy(self.routing.strategy, len(self.teachers.kinds))

    def cta_schedule(self, n_experts=None):
        if not self.routing.cta:
            return None
        L = n_experts if n_experts is not None else self.model.n_experts
        return CTASchedule(L, min(self.routing.k_min, L), self.cta_horizon)

    @property
    def cta_horizon(self):
        return self.routing.horizon or max(1, self.finetune.steps // 2)

    def replace(self, **dotted):
        """New config with ``section.key`` values replaced (values already typed)."""
        return from_mapping({**to_mapping(self), **dotted})

    def with_seed(self, seed):
        return self.replace(**{"run.seed": seed})


def parse_strategy(text, n_teachers):
    t = text.strip().lower()
    if t == "ftr":
        return FTR
    if t == "ltr":
        return LTR
    if t == "per":
        return PER
    if t.startswith("ts") and t[2:].isdigit():
        i = int(t[2:])
        if i < n_teachers:
            return TS(i)
    valid = ", ".join([f"ts{i}" for i in range(n_teachers)] + ["ftr", "ltr", "per"])
    raise ConfigError("routing.strategy", f"unknown strategy {text!r}; expected one of {valid}")


def _require(cond, message, name):
    if not cond:
        raise ConfigError(name, message)


def validate(cfg):
    m, t, lo, d, r, f, tk, an, run = (cfg.model, cfg.teachers, cfg.loss, cfg.distill, cfg.routing,
                                       cfg.finetune, cfg.task, cfg.analysis, cfg.run)
    n_teachers = len(t.kinds)
    _require(n_teachers >= 1, "at least one teacher is required", "teachers.kinds")
    for kind in t.kinds:
        _require(kind in KINDS, f"unknown teacher kind {kind!r}; expected one of {KINDS}", "teachers.kinds")
    _require(len(t.dims) == n_teachers, f"{len(t.dims)} dims for {n_teachers} teachers", "teachers.dims")
    _require(all(x >= 1 for x in t.dims), "teacher dims must be >= 1", "teachers.dims")
    _require(not lo.alpha or len(lo.alpha) == n_teachers,
             f"{len(lo.alpha)} alpha weights for {n_teachers} teachers", "loss.alpha")
    _require(all(a >= 0 for a in lo.alpha), "alpha weights must be >= 0", "loss.alpha")
    _require(r.k_min >= 1, "k_min must be >= 1", "routing.k_min")
    _require(r.k_min <= m.n_experts, f"k_min={r.k_min} exceeds {m.n_experts} experts", "routing.k_min")
    _require(r.horizon >= 0, "horizon must be >= 0 (0 selects half the finetuning steps)", "routing.horizon")
    _require(0 <= r.k <= m.n_experts, f"k={r.k} outside [0, {m.n_experts}]", "routing.k")
    parse_strategy(r.strategy, n_teachers)
    _require(not r.cta or r.strategy.lower() == "per", "top-K annealing applies to the per strategy only",
             "routing.cta")
    for name, v in (("distill.steps", d.steps), ("distill.batch_size", d.batch_size),
                    ("finetune.steps", f.steps), ("finetune.batch_size", f.batch_size),
                    ("run.seeds", run.seeds), ("task.n_eval", tk.n_eval), ("analysis.pool_size", an.pool_size)):
        _require(v >= 1, "must be >= 1", name)
    _require(d.peak_lr > 0, "must be > 0", "distill.peak_lr")
    _require(f.lr > 0, "must be > 0", "finetune.lr")
    _require(f.router_lr_scale > 0, "must be > 0", "finetune.router_lr_scale")
    _require(f.schedule in ("constant", "cosine"), "expected 'constant' or 'cosine'", "finetune.schedule")
    _require(0 <= f.n_dfm <= m.n_experts, f"n_dfm outside [0, {m.n_experts}]", "finetune.n_dfm")
    _require(f.n_tfs >= 0 and f.n_dfm + f.n_tfs >= 1, "the expert mix must hold at least one expert",
             "finetune.n_tfs")
    _require(0 <= tk.relevant_teacher < n_teachers, f"outside [0, {n_teachers})", "task.relevant_teacher")
    _require(tk.threshold > 0, "must be > 0", "task.threshold")
    _require(0 < an.fraction <= 1, "must lie in (0, 1]", "analysis.fraction")
    _require(an.k >= 1 and an.n_components >= 1, "must be >= 1", "analysis.k")
    _require(run.seed >= 0, "seeds are non-negative integers", "run.seed")
    try:
        cfg.model_config()
        cfg.distill_config()
        from .schedule import LRSchedule
        LRSchedule(d.steps, d.peak_lr, d.warmup_fraction, d.constant_fraction)
    except ConfigError:
        raise
    except ContractError as exc:
        raise ConfigError("model", str(exc)) from exc


# ------------------------------------------------------------ (de)serialisation


def _convert(value, default, name):
    """Text -> the type of the field's default value."""
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [s.strip() for s in value.split(",") if s.strip()]
            if name == "teachers.kinds":
                return tuple(items)
            if name == "teachers.dims":
                return tuple(int(s) for s in items)
            return tuple(float(s) for s in items)
        return value.strip()
    except ValueError:
        raise ConfigError(name, f"cannot parse {value!r} as {type(default).__name__}") from None


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def defaults():
    return ExperimentConfig()


def to_mapping(cfg):
    return {f"{s}.{f.name}": getattr(getattr(cfg, s), f.name)
            for s in _SECTIONS for f in fields(_SECTIONS[s])}


def from_mapping(mapping):
    """Build a config from ``{"section.key": value}``; values may be text or typed."""
    base = defaults()
    sections = {s: {} for s in _SECTIONS}
    for name, value in mapping.items():
        sec, _, key = name.partition(".")
        if sec not in _SECTIONS:
            raise ConfigError(name, f"unknown section {sec!r}; expected one of {', '.join(_SECTIONS)}")
        known = {f.name for f in fields(_SECTIONS[sec])}
        if key not in known:
            raise ConfigError(name, f"unknown key {key!r} in section [{sec}]")
        default = getattr(getattr(base, sec), key)
        sections[sec][key] = _convert(value, default, name) if isinstance(value, str) and \
            not isinstance(default, str) else value
    return ExperimentConfig(**{s: dataclasses.replace(getattr(base, s), **kv) for s, kv in sections.items()})


def parse(text):
    cp = configparser.ConfigParser(interpolation=None, default_section="\0none")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed config: {exc}") from None
    return from_mapping({f"{sec}.{key}": value for sec in cp.sections() for key, value in cp.items(sec)})


def serialize(cfg):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec, cls in _SECTIONS.items():
        cp[sec] = {f.name: format_value(getattr(getattr(cfg, sec), f.name)) for f in fields(cls)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load(path):
    with open(path) as fh:
        return parse(fh.read())
