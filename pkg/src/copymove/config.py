"""Model and training configuration.

Configs are frozen dataclasses, validated on construction, and serializable
to a flat ``key = value`` text format (one key per line, keys mirroring the
field paths, e.g. ``encoder.channels = 32,64,160,256``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

N_STAGES = 4

# Correlation maps live at strides 8/8/16/32: level 1 is downsampled once
# before matching, levels 2-4 keep their native encoder strides.
CORRELATION_STRIDES = (8, 8, 16, 32)


@dataclass(frozen=True)
class EncoderConfig:
    """Four-stage hierarchical transformer encoder hyperparameters."""

    channels: tuple = (32, 64, 160, 256)
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 5, 8)
    reductions: tuple = (8, 4, 2, 1)
    patch_kernels: tuple = (7, 3, 3, 3)
    patch_strides: tuple = (4, 2, 2, 2)
    patch_paddings: tuple = (3, 1, 1, 1)
    ffn_expansion: int = 2

    def __post_init__(self):
        for name in ("channels", "depths", "heads", "reductions",
                     "patch_kernels", "patch_strides", "patch_paddings"):
            value = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != N_STAGES:
                raise ConfigError(f"encoder.{name} must have {N_STAGES} entries, got {len(value)}")
            if any(v < 1 for v in value):
                raise ConfigError(f"encoder.{name} entries must be >= 1, got {value}")
        for c, n in zip(self.channels, self.heads):
            if c % n != 0:
                raise ConfigError(f"channels {c} not divisible by head count {n}")
        if (self.patch_kernels[0], self.patch_strides[0], self.patch_paddings[0]) != (7, 4, 3):
            raise ConfigError("stage-1 patch merge must use kernel 7, stride 4, padding 3")
        for j in range(1, N_STAGES):
            if (self.patch_kernels[j], self.patch_strides[j], self.patch_paddings[j]) != (3, 2, 1):
                raise ConfigError(f"stage-{j + 1} patch merge must use kernel 3, stride 2, padding 1")
        if self.ffn_expansion < 1:
            raise ConfigError("ffn_expansion must be >= 1")


@dataclass(frozen=True)
class DecoderConfig:
    """Correlation filtering and mask decoder widths."""

    top_t: int = 64
    fpn_channels: int = 32
    mscfc_channels: int = 64

    def __post_init__(self):
        if self.top_t < 1:
            raise ConfigError(f"top_t must be >= 1, got {self.top_t}")
        if self.fpn_channels < 1 or self.mscfc_channels < 1:
            raise ConfigError("decoder channel widths must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    """Distillation settings: multi-kernel cube and strip pooling distances.

    ``distill_weight`` scales the combined distillation term added to the
    cross-entropy loss.  Spatial cube kernels run stride-1 average pooling at
    each listed size; the channel kernel pools along the channel axis.  Strip
    pooling divides each map into q x q blocks for q = 1..Q, with a larger Q
    for the predicted mask than for the feature maps.
    """

    distill_weight: float = 1.0
    cube_spatial_kernels: tuple = (4, 8, 12, 16, 20, 24)
    cube_channel_kernels: tuple = (3,)
    strip_q_mask: int = 4
    strip_q_feature: int = 2

    def __post_init__(self):
        object.__setattr__(self, "cube_spatial_kernels",
                           tuple(int(v) for v in self.cube_spatial_kernels))
        object.__setattr__(self, "cube_channel_kernels",
                           tuple(int(v) for v in self.cube_channel_kernels))
        if self.distill_weight < 0:
            raise ConfigError(f"distill_weight must be >= 0, got {self.distill_weight}")
        if not self.cube_spatial_kernels or not self.cube_channel_kernels:
            raise ConfigError("cube pooling kernel lists must be non-empty")
        if any(k < 1 for k in self.cube_spatial_kernels + self.cube_channel_kernels):
            raise ConfigError("cube pooling kernels must be >= 1")
        if self.strip_q_mask < 1 or self.strip_q_feature < 1:
            raise ConfigError("strip pooling block counts must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Full model configuration; random init is a pure function of ``seed``."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    image_size: tuple = (64, 64)
    seed: int = 0

    def __post_init__(self):
        h, w = (int(v) for v in self.image_size)
        object.__setattr__(self, "image_size", (h, w))
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(f"image_size must be positive multiples of 32, got {(h, w)}")

    def correlation_sizes(self):
        """(h, w) of each correlation map at the configured image size."""
        h, w = self.image_size
        return tuple((h // s, w // s) for s in CORRELATION_STRIDES)

    def level_top_t(self):
        """Per-level top-T, clamped once here to each map's location count."""
        return tuple(min(self.decoder.top_t, ch * cw) for ch, cw in self.correlation_sizes())


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for supervised training and continual learning."""

    train_manifest: str = ""
    checkpoint_path: str = ""
    epochs: int = 1
    batch_size: int = 4
    learning_rate: float = 6e-5
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    seed: int = 0
    val_manifest: str = ""
    precision: str = "single"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def model_config_to_text(config: ModelConfig) -> str:
    """Flatten a ModelConfig to ``section.key = value`` lines."""
    lines = []
    for section in ("encoder", "decoder", "distill"):
        sub = getattr(config, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    lines.append(f"image_size = {_format_value(config.image_size)}")
    lines.append(f"seed = {config.seed}")
    return "\n".join(lines) + "\n"


def _parse_scalar(text, kind):
    if kind is float:
        return float(text)
    return int(text)


def _parse_value(field_obj, text):
    text = text.strip()
    if field_obj.type in ("tuple", tuple):
        if not text:
            return ()
        return tuple(part.strip() for part in text.split(","))
    if field_obj.type in ("float", float):
        return float(text)
    if field_obj.type in ("str", str):
        return text
    return int(text)


def model_config_from_text(text: str) -> ModelConfig:
    """Parse the flat key=value form back into a ModelConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()

    sections = {"encoder": EncoderConfig, "decoder": DecoderConfig, "distill": DistillConfig}
    kwargs = {}
    consumed = set()
    for section, cls in sections.items():
        sub_kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"{section}.{f.name}"
            if key in values:
                sub_kwargs[f.name] = _parse_value(f, values[key])
                consumed.add(key)
        kwargs[section] = cls(**sub_kwargs)
    if "image_size" in values:
        parts = values["image_size"].split(",")
        if len(parts) != 2:
            raise ConfigError(f"image_size must be 'H,W', got {values['image_size']!r}")
        kwargs["image_size"] = (int(parts[0]), int(parts[1]))
        consumed.add("image_size")
    if "seed" in values:
        kwargs["seed"] = int(values["seed"])
        consumed.add("seed")
    unknown = set(values) - consumed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**kwargs)


def load_model_config(path) -> ModelConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return model_config_from_text(path.read_text())


def save_model_config(config: ModelConfig, path) -> None:
    Path(path).write_text(model_config_to_text(config))
