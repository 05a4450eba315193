"""Run configuration: a line-oriented ``section.key = value`` format.

Example::

    # two-moons, 4 labels per class
    dataset.kind = two-moons
    dataset.n_labeled = 8
    model.profile = mlp
    model.num_classes = 2
    loss.lambda = 0.001

Unknown keys are rejected; missing keys take the defaults below, which
follow the CIFAR-10 column of the published hyperparameters (batch 25,
1400 epochs with linear decay after 1200, Adam 3e-4 / 0.5, lambda 1e-3,
epsilon 1e-5, Gaussian init sigma 0.05, leaky-ReLU slope 0.2).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

PROFILES = ("conv-large", "conv-small", "mlp")
MODES = ("joint", "two-stage", "baseline")
DATASETS = ("two-moons", "circle", "swiss-roll-2d", "idx")


@dataclass
class DatasetConfig:
    kind: str = "idx"
    n_samples: int = 2000
    n_test: int = 1000
    noise: float = 0.1
    n_labeled: int = 4000
    n_validation: int = 1000
    split_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ModelConfig:
    profile: str = "conv-large"
    width: float = 1.0
    num_classes: int = 10
    latent_dim: int = 100
    hidden: int = 64
    depth: int = 2
    mlp_dropout: float = 0.0
    lrelu_slope: float = 0.2
    generator_bn_weight_norm: bool = False
    bn_momentum: float = 0.9
    init_sigma: float = 0.05
    dtype: str = "float64"


@dataclass
class LossConfig:
    # ``lambda`` in the file; a Python keyword, hence the trailing underscore
    lambda_: float = 1e-3
    epsilon: float = 1e-5
    mc_samples: int | None = None  # None -> batch size


@dataclass
class TrainConfig:
    batch_size: int = 25
    epochs: int = 1400
    decay_start: int = 1200
    ema_decay: float = 0.999
    early_stopping: bool = True


@dataclass
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunSection:
    mode: str = "joint"
    seeds: tuple = (0, 1, 2, 3, 4)
    name: str = "run"
    output_dir: str = "runs"
    generator_checkpoint: str = ""


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSection = field(default_factory=RunSection)
    defaulted: frozenset = field(default=frozenset(), compare=False, repr=False)

    @property
    def mc_samples(self) -> int:
        return self.loss.mc_samples or self.train.batch_size

    def replace(self, **changes) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"loss.lambda": 0.0})``."""
        out = RunConfig(**{s: dataclasses.replace(getattr(self, s)) for s in _SECTIONS})
        for key, value in changes.items():
            section, attr = _resolve(key)
            setattr(getattr(out, section), attr, value)
        validate(out)
        return out


_SECTIONS = ("dataset", "model", "loss", "train", "optim", "run")


def _resolve(key: str) -> tuple[str, str]:
    if key.count(".") != 1:
        raise ConfigError(f"malformed key {key!r}, expected section.name", field=key)
    section, name = key.split(".")
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config field {key!r}", field=key)
    attr = "lambda_" if name == "lambda" else name
    if attr not in {f.name for f in fields(_section_type(section))}:
        raise ConfigError(f"unknown config field {key!r}", field=key)
    return section, attr


def _section_type(section: str):
    return RunConfig.__dataclass_fields__[section].default_factory


def all_keys() -> list[str]:
    keys = []
    for section in _SECTIONS:
        for f in fields(_section_type(section)):
            keys.append(f"{section}.{'lambda' if f.name == 'lambda_' else f.name}")
    return keys


def _convert(key: str, raw: str, default):
    try:
        if key == "loss.mc_samples":
            return None if raw in ("auto", "") else int(raw)
        if key == "run.seeds":
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}", field=key)


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", field=None)
        key, raw = (s.strip() for s in line.split("=", 1))
        section, attr = _resolve(key)
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate field {key!r}", field=key)
        seen.add(key)
        sec = getattr(cfg, section)
        setattr(sec, attr, _convert(key, raw, getattr(sec, attr)))
    cfg.defaulted = frozenset(k for k in all_keys() if k not in seen)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", field=None) from exc
    return parse_config(text)


def serialize_config(cfg: RunConfig, mark_defaults: bool = False) -> str:
    lines = []
    for key in all_keys():
        section, attr = _resolve(key)
        line = f"{key} = {_format(getattr(getattr(cfg, section), attr))}"
        if mark_defaults and key in cfg.defaulted:
            line += "  # default"
        lines.append(line)
    return "\n".join(lines) + "\n"


def validate(cfg: RunConfig) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}", field=key)

    d, m, l, t, o, r = cfg.dataset, cfg.model, cfg.loss, cfg.train, cfg.optim, cfg.run
    need(d.kind in DATASETS, "dataset.kind", f"must be one of {DATASETS}")
    need(d.n_samples >= 2, "dataset.n_samples", "must be >= 2")
    need(d.n_test >= 0, "dataset.n_test", "must be >= 0")
    need(d.noise >= 0, "dataset.noise", "must be >= 0")
    need(d.n_labeled >= 1, "dataset.n_labeled", "must be >= 1")
    need(d.n_validation >= 0, "dataset.n_validation", "must be >= 0")
    need(m.profile in PROFILES, "model.profile", f"must be one of {PROFILES}")
    need(m.width > 0, "model.width", "must be positive")
    need(m.num_classes >= 2, "model.num_classes", "must be >= 2")
    need(m.latent_dim >= 1, "model.latent_dim", "must be >= 1")
    need(m.hidden >= 1 and m.depth >= 1, "model.hidden", "hidden and depth must be >= 1")
    need(0 <= m.mlp_dropout < 1, "model.mlp_dropout", "must lie in [0, 1)")
    need(0 <= m.bn_momentum <= 1, "model.bn_momentum", "must lie in [0, 1]")
    need(m.init_sigma > 0, "model.init_sigma", "must be positive")
    need(m.dtype in ("float64", "float32"), "model.dtype", "must be float64 or float32")
    need(l.lambda_ >= 0, "loss.lambda", "must be >= 0")
    need(l.epsilon > 0, "loss.epsilon", "must be positive")
    need(l.mc_samples is None or l.mc_samples >= 1, "loss.mc_samples", "must be >= 1 or auto")
    need(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    need(t.epochs >= 1, "train.epochs", "must be >= 1")
    need(0 <= t.decay_start <= t.epochs, "train.decay_start", "must lie in [0, train.epochs]")
    need(0 <= t.ema_decay <= 1, "train.ema_decay", "must lie in [0, 1]")
    need(o.lr > 0, "optim.lr", "must be positive")
    need(0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, "optim.beta1", "betas must lie in [0, 1)")
    need(o.eps > 0, "optim.eps", "must be positive")
    need(r.mode in MODES, "run.mode", f"must be one of {MODES}")
    need(len(r.seeds) >= 1, "run.seeds", "needs at least one seed")
    need(bool(r.name) and "/" not in r.name, "run.name", "must be a plain non-empty name")
