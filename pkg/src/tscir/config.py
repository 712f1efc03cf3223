"""Configuration records and the flat key-value run-config format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid or contradictory configuration."""


# Layer placements reported for a 12-layer text encoder.
REFERENCE_DEPTH = 12
REFERENCE_VSI_LAYERS = (5, 8, 11)
REFERENCE_ADAPTER_LAYERS = (2, 4, 6, 8, 10, 12)


def scale_layers(layers: tuple[int, ...], depth: int) -> tuple[int, ...]:
    """Map 1-based layer indices of a 12-layer encoder onto `depth` layers.

    Uses floor scaling clamped to >= 1, so depth 12 is the identity.
    """
    scaled = {max(1, math.floor(i * depth / REFERENCE_DEPTH)) for i in layers}
    return tuple(sorted(scaled))


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    image_size: int = 32
    patch_size: int = 8
    max_tokens: int = 20
    num_layers_img: int = 2
    num_layers_txt: int = 2
    num_heads: int = 4
    vocab_size: int = 0  # 0 -> size of the toy vocabulary
    vsi_layers: tuple[int, ...] | None = None
    adapter_layers: tuple[int, ...] | None = None
    adapter_dim: int = 16
    latent_dim: int = 32
    adapter_activation: str = "silu"  # "silu" or "linear"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size == 0:
            from .tokenizer import VOCAB

            object.__setattr__(self, "vocab_size", len(VOCAB))
        if self.vsi_layers is None:
            object.__setattr__(
                self, "vsi_layers", scale_layers(REFERENCE_VSI_LAYERS, self.num_layers_txt)
            )
        if self.adapter_layers is None:
            object.__setattr__(
                self,
                "adapter_layers",
                scale_layers(REFERENCE_ADAPTER_LAYERS, self.num_layers_txt),
            )
        object.__setattr__(self, "vsi_layers", tuple(sorted(set(self.vsi_layers))))
        object.__setattr__(self, "adapter_layers", tuple(sorted(set(self.adapter_layers))))
        self.validate()

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    def validate(self) -> None:
        for name in ("embed_dim", "image_size", "patch_size", "max_tokens", "num_heads",
                     "adapter_dim", "latent_dim", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_layers_img < 1 or self.num_layers_txt < 1:
            raise ConfigError("encoder depth must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.image_size % self.patch_size:
            raise ConfigError("patch_size must divide image_size")
        if self.max_tokens < 2:
            raise ConfigError("max_tokens must leave room for BOS and EOS")
        valid = set(range(1, self.num_layers_txt + 1))
        if not set(self.vsi_layers) <= valid:
            raise ConfigError(f"vsi_layers {self.vsi_layers} outside 1..{self.num_layers_txt}")
        if not set(self.adapter_layers) <= valid:
            raise ConfigError(
                f"adapter_layers {self.adapter_layers} outside 1..{self.num_layers_txt}"
            )
        if self.adapter_activation not in ("silu", "linear"):
            raise ConfigError("adapter_activation must be 'silu' or 'linear'")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["vsi_layers"] = list(self.vsi_layers)
        d["adapter_layers"] = list(self.adapter_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        for key in ("vsi_layers", "adapter_layers"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class LossConfig:
    tau_stage1: float = 0.05
    tau_stage2: float = 0.07
    logit_convention: str = "divide_by_tau"  # or "multiply_by_tau"
    alpha: float = 0.2
    hard_negative_k: int = 20
    beta_clamp_max: float = 0.9
    beta_degenerate_value: float = 0.5

    def __post_init__(self):
        if self.tau_stage1 <= 0 or self.tau_stage2 <= 0:
            raise ConfigError("temperatures must be positive")
        if self.logit_convention not in ("divide_by_tau", "multiply_by_tau"):
            raise ConfigError(f"unknown logit_convention {self.logit_convention!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 <= self.beta_clamp_max <= 1.0:
            raise ConfigError("beta_clamp_max must lie in [0, 1]")
        if self.hard_negative_k < 0:
            raise ConfigError("hard_negative_k must be >= 0")

    def tau(self, stage: int) -> float:
        return self.tau_stage1 if stage == 1 else self.tau_stage2

    def scale(self, stage: int) -> float:
        """Multiplier applied to cosine similarities before the softmax."""
        tau = self.tau(stage)
        return 1.0 / tau if self.logit_convention == "divide_by_tau" else tau


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    learning_rate: float = 1e-4
    weight_decay: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    vsi_enabled: bool = True
    sta_enabled: bool = True
    adapters_enabled: bool | None = None  # None -> off in stage 1, on in stage 2
    hard_negatives_enabled: bool = True
    stage2_mapping_enabled: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for contrastive training")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.adapters_enabled is None:
            object.__setattr__(self, "adapters_enabled", self.stage == 2)
        if self.stage == 1 and self.adapters_enabled:
            raise ConfigError("adapters cannot be enabled during Stage I")
        if self.stage == 2 and not self.adapters_enabled:
            raise ConfigError("Stage II trains only the adapters; adapters_enabled must be true")


@dataclass(frozen=True)
class BackboneConfig:
    """CLIP-style pretraining of the dual encoder that both stages keep frozen."""

    epochs: int = 20
    learning_rate: float = 5e-4
    weight_decay: float = 0.1
    batch_size: int = 64
    tau: float = 0.07
    warmup_steps: int = 200
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2 or self.learning_rate < 0 or self.tau <= 0:
            raise ConfigError("invalid backbone pretraining settings")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training command reads from a run-config file."""

    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


_SECTIONS = {"": TrainConfig, "loss.": LossConfig, "model.": ModelConfig,
             "backbone.": BackboneConfig}


def _coerce(raw: str, typ: Any, key: str) -> Any:
    typ = str(typ)
    raw = raw.strip()
    if raw.lower() == "none" and "None" in typ:
        return None
    try:
        if typ.startswith("bool"):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "str":
            return raw
        if "tuple" in typ:
            if raw.lower() in ("", "none"):
                return None
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported field type for {key}")


def parse_run_config(text: str, stage: int | None = None) -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment; unknown keys are rejected.

    Bare keys set TrainConfig fields; `loss.*`, `model.*` and `backbone.*` set
    LossConfig, ModelConfig and BackboneConfig. `stage`, when given, is the
    stage assumed if the file does not set one; a conflicting value is an error.
    """
    values: dict[str, dict[str, Any]] = {prefix: {} for prefix in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        prefix = next((p for p in _SECTIONS if p and key.startswith(p)), "")
        name = key[len(prefix):]
        known = {f.name: f.type for f in fields(_SECTIONS[prefix])}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values[prefix]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[prefix][name] = _coerce(raw, known[name], key)
    if stage is not None:
        if values[""].setdefault("stage", stage) != stage:
            raise ConfigError(f"config sets stage = {values['']['stage']}, command expects {stage}")
    return RunConfig(
        train=TrainConfig(**values[""]),
        loss=LossConfig(**values["loss."]),
        model=ModelConfig(**values["model."]),
        backbone=BackboneConfig(**values["backbone."]),
    )


def load_run_config(path: str | Path, stage: int | None = None) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"), stage)


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for prefix, obj in (("", cfg.train), ("loss.", cfg.loss), ("model.", cfg.model),
                        ("backbone.", cfg.backbone)):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{prefix}{f.name} = {v}")
    return "\n".join(lines) + "\n"
