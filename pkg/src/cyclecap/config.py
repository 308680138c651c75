"""Run configuration: nested dataclasses with a flat dotted-key text format.

Files hold one `section.key=value` per line (# comments allowed); CLI flags
override file values. Unknown keys are rejected, and every run writes the
fully resolved config next to its outputs so a run can be replayed from the
echo alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Bad config key, value, or file."""


@dataclass
class SynthConfig:
    num_videos: int = 200
    steps: int = 64
    feature_dim: int = 32
    num_event_types: int = 3
    events_min: int = 1
    events_max: int = 4
    noise_std: float = 1.0
    seed: int = 7


@dataclass
class DataConfig:
    vocab_cap: int = 6000
    max_caption_len: int = 30


@dataclass
class ModelConfig:
    hidden_dim: int = 512
    mask_scale: float = 50.0
    anchor_scales: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    init_seed: int = 0


@dataclass
class TrainConfig:
    lambda_s: float = 0.1
    lambda_a: float = 0.1
    sigma: float = 0.05
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    clip_norm: float = 5.0
    pretrain_epochs: int = 5
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    seed: int = 0


@dataclass
class InferConfig:
    num_proposals: int = 15
    keep_iou: float = 0.5
    merge_iou: float = 0.7
    rounds: int = 1
    min_width: float = 0.05
    seed: int = 0


@dataclass
class EvalConfig:
    caption_tious: tuple[float, ...] = (0.3, 0.5, 0.7, 0.9)
    recall_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    localization_sigmas: tuple[float, ...] = (0.1, 0.3, 0.5)


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def set_master_seed(self, seed: int) -> None:
        """--seed N overrides every per-stage seed."""
        self.synth.seed = seed
        self.model.init_seed = seed
        self.train.seed = seed
        self.infer.seed = seed


def _parse_value(text: str, target_type):
    text = text.strip()
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    if target_type is str:
        return text
    if target_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(text)
    if target_type == tuple[float, ...]:
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    raise ConfigError(f"unsupported config field type {target_type!r}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def set_key(config: RunConfig, dotted_key: str, raw_value: str) -> None:
    parts = dotted_key.split(".")
    if len(parts) != 2:
        raise ConfigError(f"key must look like section.field, got {dotted_key!r}")
    section_name, field_name = parts
    if not hasattr(config, section_name) or not dataclasses.is_dataclass(
        getattr(config, section_name)
    ):
        raise ConfigError(f"unknown config section {section_name!r}")
    section = getattr(config, section_name)
    fields = {f.name: f for f in dataclasses.fields(section)}
    if field_name not in fields:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    try:
        value = _parse_value(raw_value, _resolve_type(section, field_name))
    except (ValueError, TypeError):
        raise ConfigError(f"bad value {raw_value!r} for {dotted_key!r}")
    setattr(section, field_name, value)


def _resolve_type(section, field_name):
    # Field types are stored as strings under `from __future__ import
    # annotations`; map them back to runtime types.
    annotation = {f.name: f.type for f in dataclasses.fields(section)}[field_name]
    if not isinstance(annotation, str):
        return annotation
    return {
        "int": int,
        "float": float,
        "str": str,
        "bool": bool,
        "tuple[float, ...]": tuple[float, ...],
    }[annotation]


def load_config_file(path, config: RunConfig | None = None) -> RunConfig:
    config = config if config is not None else RunConfig()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            set_key(config, key.strip(), value)
    return config


def to_text(config: RunConfig) -> str:
    """Resolved config as sorted `section.key=value` lines."""
    lines = []
    for section_field in dataclasses.fields(config):
        section = getattr(config, section_field.name)
        for f in dataclasses.fields(section):
            lines.append(
                f"{section_field.name}.{f.name}={_format_value(getattr(section, f.name))}"
            )
    return "\n".join(sorted(lines)) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(to_text(config).encode("utf-8")).hexdigest()[:16]
