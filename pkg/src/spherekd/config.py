"""Run configuration: schema, defaults, YAML loading, dotted overrides.

A RunConfig fully determines a run given the same build. Unknown keys are
rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .nets import ArchConfig


@dataclass
class DataConfig:
    num_train_classes: int = 64
    num_test_classes: int = 16
    samples_per_class: int = 20
    latent_dim: int = 16
    noise_sigma: float = 0.15
    image_size: int = 16
    num_distractors: int = 500
    renderer_hidden: int = 64
    pairs_per_side: int = 300
    folds: int = 10


@dataclass
class ClassifierConfig:
    mode: str = "normalized"  # plain | normalized
    scale: float = 16.0


@dataclass
class TrainConfig:
    batch_size: int = 32
    teacher_epochs: int = 30
    student_epochs: int = 30
    learning_rate: float = 0.1
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_at: tuple[float, ...] = (0.6, 0.85)  # fractions of total steps


@dataclass
class DistillConfig:
    kind: str = "angular"  # none | l2 | angular
    lambda_n: float | None = None  # None -> kind default (angular 1.0, l2 0.001)
    final_stage_only: bool = False

    def resolved_lambda_n(self) -> float:
        if self.lambda_n is not None:
            return float(self.lambda_n)
        return {"angular": 1.0, "l2": 0.001, "none": 0.0}[self.kind]


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def validate(self) -> "RunConfig":
        self.arch.validate()
        if self.classifier.mode not in ("plain", "normalized"):
            raise ConfigError(f"classifier.mode: unknown value {self.classifier.mode!r}")
        if self.distill.kind not in ("none", "l2", "angular"):
            raise ConfigError(f"distill.kind: unknown value {self.distill.kind!r}")
        if self.train.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 (batch norm needs it)")
        if self.train.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.data.num_train_classes < 2 or self.data.num_test_classes < 2:
            raise ConfigError("data: class counts must be >= 2")
        if self.data.samples_per_class < 2:
            raise ConfigError("data.samples_per_class must be >= 2")
        if self.data.folds < 2:
            raise ConfigError("data.folds must be >= 2")
        if self.data.pairs_per_side % self.data.folds != 0:
            raise ConfigError("data.pairs_per_side must be divisible by data.folds")
        if self.data.image_size != self.arch.input_size:
            raise ConfigError(
                f"data.image_size {self.data.image_size} != arch.input_size "
                f"{self.arch.input_size}"
            )
        return self

    def canonical(self) -> dict:
        tree = asdict(self)
        tree["arch"] = self.arch.canonical()
        tree["train"]["decay_at"] = list(self.train.decay_at)
        return tree


_SECTIONS = {
    "data": DataConfig,
    "arch": ArchConfig,
    "classifier": ClassifierConfig,
    "train": TrainConfig,
    "distill": DistillConfig,
}
_SCALARS = {"seed": int, "output_dir": str}


def _build_section(cls, tree: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in tree.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if isinstance(value, dict):
            raise ConfigError(f"{prefix}{key}: expected a scalar or list")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_tree(tree: dict) -> RunConfig:
    """Build a RunConfig from a nested dict, rejecting unknown keys."""
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    cfg = RunConfig()
    for key, value in tree.items():
        if key in _SCALARS:
            setattr(cfg, key, _SCALARS[key](value))
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            setattr(cfg, key, _build_section(_SECTIONS[key], value, f"{key}."))
        else:
            raise ConfigError(f"unknown config key: {key}")
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    """Load YAML config from `path`, or pure defaults when path is None."""
    if path is None:
        return RunConfig().validate()
    text = Path(path).read_text()
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_tree(tree)


def _parse_override_value(raw: str):
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted key=value overrides (values parsed as YAML scalars)."""
    tree = cfg.canonical()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = tree
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[keys[-1]] = _parse_override_value(raw)
    return config_from_tree(tree)


def dump_config(cfg: RunConfig) -> str:
    """Effective config as YAML with every default materialized."""
    return yaml.safe_dump(cfg.canonical(), sort_keys=True, default_flow_style=False)


def write_effective_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.yaml"
    path.write_text(dump_config(cfg))
    return path
