"""Experiment configuration as flat ``key = value`` text.

Keys without a dot set top-level fields; ``data.``, ``model.``,
``corrupt.`` and ``sweep.`` keys set the matching section.  Lists are
comma-separated, booleans are ``true``/``false``.  Unknown keys are
errors, and ``to_text`` output parses back to an equal config.
"""

import dataclasses
import typing
from dataclasses import dataclass, field

from .data.synth import SHAPES, NUM_PARTS
from .errors import ConfigError
from .layers import AGGREGATORS
from .pointnet import ClassifierSpec, SegmenterSpec

TASKS = ("classify", "segment", "normals")
SOURCES = ("synth", "mnist", "dir")


@dataclass
class DataConfig:
    source: str = "synth"
    classes: tuple[str, ...] = SHAPES
    clouds_per_class: int = 200
    points: int = 256
    noise: float = 0.0
    test_fraction: float = 0.2
    seed: int = 0
    dir: str = ""
    mnist_dir: str = ""
    mnist_train: int = 10000
    mnist_test: int = 2000


@dataclass
class ModelConfig:
    k: int = 1024
    input_transform: bool = True
    feature_transform: bool = True
    reg_weight: float = 0.001
    aggregator: str = "max"
    dropout_keep: float = 0.7
    pre_widths: tuple[int, ...] = (64, 64)
    post_widths: tuple[int, ...] = (64, 128)
    fc_widths: tuple[int, ...] = (512, 256)
    tnet_mlp_widths: tuple[int, ...] = (64, 128, 1024)
    tnet_fc_widths: tuple[int, ...] = (512, 256)
    head_widths: tuple[int, ...] = (512, 256, 128, 128)
    category_conditioning: bool = False


@dataclass
class CorruptConfig:
    protocol: str = "none"
    severity: float = 0.0


@dataclass
class SweepConfig:
    deletion_ratios: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 0.875)
    outlier_ratios: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    perturb_sigmas: tuple[float, ...] = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1)
    k_list: tuple[int, ...] = (64, 128, 256, 512, 1024)
    n_list: tuple[int, ...] = (64, 128, 256)
    check_clouds: int = 10


@dataclass
class ExperimentConfig:
    task: str = "classify"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.001
    lr_decay_every: int = 20
    lr_decay_rate: float = 0.5
    lr_floor: float = 1e-5
    bn_momentum_start: float = 0.5
    bn_momentum_end: float = 0.99
    bn_refresh_batches: int = 50
    augment: bool = True
    jitter: float = 0.02
    eval_batch_size: int = 64
    out: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    corrupt: CorruptConfig = field(default_factory=CorruptConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.data.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        if self.model.aggregator not in AGGREGATORS:
            raise ConfigError(f"model.aggregator must be one of {AGGREGATORS}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs, batch_size and eval_batch_size must be positive")
        if self.lr <= 0 or self.lr_floor < 0 or self.lr_decay_every < 1:
            raise ConfigError("invalid learning-rate schedule")
        if self.bn_refresh_batches < 0:
            raise ConfigError("bn_refresh_batches must be non-negative")
        if not 0.0 < self.data.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        if self.task != "classify" and self.data.source == "mnist":
            raise ConfigError("MNIST point sets carry no part labels")
        return self


_SECTIONS = ("data", "model", "corrupt", "sweep")


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(kind, text):
    text = text.strip()
    if kind is bool:
        return _parse_bool(text)
    if kind in (int, float, str):
        return kind(text)
    if typing.get_origin(kind) is tuple:
        item = typing.get_args(kind)[0]
        return tuple(_coerce(item, t) for t in text.split(",") if t.strip())
    raise ValueError(f"unsupported field type {kind}")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _target(config, key):
    parts = key.split(".")
    if len(parts) == 1:
        obj, name = config, parts[0]
        if name in _SECTIONS:
            raise ConfigError(f"{name!r} is a section, not a key")
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        obj, name = getattr(config, parts[0]), parts[1]
    else:
        raise ConfigError(f"unknown config key {key!r}")
    hints = typing.get_type_hints(type(obj))
    if name not in hints or not any(f.name == name for f in dataclasses.fields(obj)):
        raise ConfigError(f"unknown config key {key!r}")
    return obj, name, hints[name]


def set_value(config, key, text):
    """Assign the textual ``text`` to ``key`` (``model.k``, ``seed``, ...)."""
    obj, name, kind = _target(config, key.strip())
    try:
        setattr(obj, name, _coerce(kind, text))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_pairs(text, source="<config>"):
    """``[(key, value, line)]`` from config text; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip(), lineno))
    return pairs


def from_text(text, overrides=(), source="<config>"):
    config = ExperimentConfig()
    for key, value, lineno in parse_pairs(text, source):
        try:
            set_value(config, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    apply_overrides(config, overrides)
    return config.validate()


def load_config(path, overrides=()):
    with open(path) as fh:
        return from_text(fh.read(), overrides, source=str(path))


def apply_overrides(config, overrides):
    """Apply ``key=value`` strings after the file has been read."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_value(config, key, value)
    return config


def to_pairs(config):
    pairs = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name in _SECTIONS:
            for g in dataclasses.fields(value):
                pairs.append((f"{f.name}.{g.name}", _format(getattr(value, g.name))))
        else:
            pairs.append((f.name, _format(value)))
    return pairs


def to_text(config):
    return "".join(f"{k} = {v}\n" for k, v in to_pairs(config))


def copy_config(config, **top):
    """Deep copy with top-level fields replaced."""
    new = from_text(to_text(config))
    for key, value in top.items():
        setattr(new, key, value)
    return new


def model_spec(config, num_classes, input_dim=3, num_parts=NUM_PARTS):
    """The network spec a config describes for a dataset of ``num_classes``."""
    m = config.model
    common = dict(
        input_dim=input_dim,
        use_input_transform=m.input_transform,
        use_feature_transform=m.feature_transform,
        pre_widths=m.pre_widths,
        post_widths=m.post_widths,
        bottleneck=m.k,
        aggregator=m.aggregator,
        tnet_mlp_widths=m.tnet_mlp_widths,
        tnet_fc_widths=m.tnet_fc_widths,
        reg_weight=m.reg_weight,
        num_points=config.data.points if m.aggregator == "sorted_mlp" else 0,
    )
    if config.task == "classify":
        return ClassifierSpec(num_classes=num_classes, fc_widths=m.fc_widths,
                              dropout_keep=m.dropout_keep, **common)
    outputs = num_parts if config.task == "segment" else 3
    return SegmenterSpec(num_outputs=outputs, head_widths=m.head_widths,
                         category_conditioning=m.category_conditioning,
                         num_categories=num_classes, **common)
