"""Run configuration: one flat dataclass, stored as an INI file with a section per module."""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from mlpmatch.augment import StrongAugSpec, WeakAugSpec
from mlpmatch.dataset import SyntheticSpec
from mlpmatch.errors import ConfigError
from mlpmatch.model import PerturbationPolicy
from mlpmatch.objective import LossWeights

RUNS_DIR_ENV = "MLPMATCH_RUNS_DIR"


def _f(default, section, item=None):
    if isinstance(default, tuple):
        return field(default=default, metadata={"section": section, "item": item})
    return field(default=default, metadata={"section": section})


@dataclass
class TrainConfig:
    # dataset
    num_classes: int = _f(4, "dataset")
    image_size: int = _f(64, "dataset")
    shapes_min: int = _f(1, "dataset")
    shapes_max: int = _f(3, "dataset")
    data_seed: int = _f(0, "dataset")
    num_labeled: int = _f(8, "dataset")
    num_unlabeled: int = _f(64, "dataset")
    num_eval: int = _f(64, "dataset")
    # empty data_root selects the synthetic generator
    data_root: str = _f("", "dataset")
    labeled_split: str = _f("labeled.txt", "dataset")
    unlabeled_split: str = _f("unlabeled.txt", "dataset")
    eval_split: str = _f("eval.txt", "dataset")

    # augment
    crop_size: int = _f(64, "augment")
    scale_min: float = _f(0.5, "augment")
    scale_max: float = _f(2.0, "augment")
    hflip_prob: float = _f(0.5, "augment")
    color_jitter_prob: float = _f(0.8, "augment")
    grayscale_prob: float = _f(0.2, "augment")
    blur_prob: float = _f(0.5, "augment")
    cutmix_prob: float = _f(0.5, "augment")
    jitter_strengths: tuple = _f((0.5, 0.5, 0.5, 0.25), "augment", float)
    fp_rate: float = _f(0.5, "augment")

    # model
    width_multiplier: float = _f(1.0, "model")
    depth_spec: tuple = _f((2, 2, 2, 2), "model", int)
    eligible_blocks: tuple = _f((), "model", str)
    stage_weights: tuple = _f((0.25, 0.25, 0.25, 0.25), "model", float)
    np_enabled: bool = _f(True, "model")
    max_skipped: int = _f(1, "model")
    relu_on_projection_skip: bool = _f(True, "model")

    # objective
    tau: float = _f(0.95, "objective")
    lambda_x: float = _f(1.0, "objective")
    lambda_x_np_max: float = _f(0.25, "objective")
    lambda_x_np_schedule: str = _f("linear", "objective")
    lambda_u_s: float = _f(0.5, "objective")
    lambda_u_fp: float = _f(0.25, "objective")
    lambda_u_np: float = _f(0.25, "objective")

    # trainer
    epochs: int = _f(80, "trainer")
    batch_size: int = _f(16, "trainer")
    base_lr: float = _f(0.001, "trainer")
    momentum: float = _f(0.9, "trainer")
    weight_decay: float = _f(1e-4, "trainer")
    poly_power: float = _f(0.9, "trainer")
    decoder_lr_mult: float = _f(10.0, "trainer")
    seed: int = _f(0, "trainer")
    eval_every: int = _f(0, "trainer")
    log_every: int = _f(50, "trainer")
    double_precision: bool = _f(False, "trainer")

    # paths
    out_dir: str = _f("runs/default", "paths")

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if not 0.0 <= self.lambda_x_np_max <= self.lambda_x:
            raise ConfigError(
                f"need 0 <= lambda_x_np_max <= lambda_x, got {self.lambda_x_np_max} and {self.lambda_x}"
            )
        if self.lambda_x_np_schedule not in ("linear", "fixed"):
            raise ConfigError(f"lambda_x_np_schedule must be 'linear' or 'fixed', got {self.lambda_x_np_schedule!r}")
        for name in ("base_lr", "epochs", "batch_size", "poly_power", "decoder_lr_mult"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_size % 2:
            raise ConfigError(f"batch_size must be even, got {self.batch_size}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if self.shapes_min > self.shapes_max:
            raise ConfigError("shapes_min must not exceed shapes_max")
        if len(self.stage_weights) != len(self.depth_spec):
            raise ConfigError("stage_weights needs one entry per stage")
        self.weak_aug().validate()
        self.strong_aug().validate()
        self.synthetic_spec().validate()
        LossWeights(self.lambda_x, self.lambda_x_np_max, self.lambda_u_s, self.lambda_u_fp,
                    self.lambda_u_np).validate()
        if not 0.0 <= self.fp_rate < 1.0:
            raise ConfigError(f"fp_rate must be in [0, 1), got {self.fp_rate}")
        return self

    def weak_aug(self) -> WeakAugSpec:
        return WeakAugSpec(self.crop_size, (self.scale_min, self.scale_max), self.hflip_prob)

    def strong_aug(self) -> StrongAugSpec:
        return StrongAugSpec(self.color_jitter_prob, self.grayscale_prob, self.blur_prob,
                             self.cutmix_prob, tuple(self.jitter_strengths))

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.image_size, self.num_classes, (self.shapes_min, self.shapes_max), self.data_seed)

    def policy(self) -> PerturbationPolicy:
        return PerturbationPolicy(self.np_enabled, self.max_skipped, tuple(self.stage_weights))

    def with_overrides(self, overrides) -> "TrainConfig":
        return apply_overrides(self, overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, exclude=("out_dir",)) -> str:
        """Short hash of every setting except the excluded (location-only) keys."""
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(repr(sorted(d.items())).encode()).hexdigest()[:12]


FIELDS = {f.name: f for f in fields(TrainConfig)}
SECTIONS = ("dataset", "augment", "model", "objective", "trainer", "paths")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind, key: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None


def parse_value(key: str, text: str):
    f = FIELDS[key]
    if f.metadata.get("item") is not None or isinstance(f.default, tuple):
        kind = f.metadata["item"]
        return tuple(_parse_scalar(p, kind, key) for p in text.split(",") if p.strip())
    return _parse_scalar(text, type(f.default), key)


def _unknown(key: str) -> ConfigError:
    return ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(FIELDS)}")


def from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    updates = {}
    for key, text in values.items():
        if key not in FIELDS:
            raise _unknown(key)
        updates[key] = parse_value(key, text) if isinstance(text, str) else text
    return replace(base or TrainConfig(), **updates)


def loads(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; valid sections: {', '.join(SECTIONS)}")
        for key, text in parser.items(section):
            if key in FIELDS and FIELDS[key].metadata["section"] != section:
                raise ConfigError(f"key {key!r} belongs in section [{FIELDS[key].metadata['section']}]")
            values[key] = text
    return from_mapping(values)


def load(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def dumps(config: TrainConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        parser.add_section(section)
    for name, f in FIELDS.items():
        parser.set(f.metadata["section"], name, _format(getattr(config, name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(config))
    return path


def apply_overrides(config: TrainConfig, overrides) -> TrainConfig:
    """Apply ``key=value`` strings; a ``section.`` prefix on the key is accepted."""
    values = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, text = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if key in FIELDS and FIELDS[key].metadata["section"] != section:
                raise ConfigError(f"key {key!r} is not in section [{section}]")
        values[key] = text
    return from_mapping(values, config)


def resolve_run_dir(config: TrainConfig) -> Path:
    """``out_dir`` as an absolute path; relative paths live under $MLPMATCH_RUNS_DIR when set."""
    out = Path(config.out_dir)
    if not out.is_absolute():
        root = os.environ.get(RUNS_DIR_ENV)
        out = Path(root) / out if root else Path.cwd() / out
    return out
