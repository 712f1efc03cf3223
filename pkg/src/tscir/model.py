"""The full two-stage model: frozen dual encoder plus Stage-I and Stage-II modules."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np
import torch
from torch import nn

from .composing import ComposingAdapter
from .config import ConfigError, ModelConfig
from .encoders import ImageEncoder, TextEncoder, TextFeatures, init_parameters
from .inversion import MappingNetwork, PatchProjection, VsiBlock, vsi_inject

STAGES = ("backbone", "stage1", "stage2")

# Parameter-name prefixes trained in each stage; everything else stays frozen.
FREEZE_POLICY = {
    "backbone": ("image.", "text."),
    "stage1": ("mapping.", "patch_proj.", "vsi."),
    "stage2": ("adapter.",),
}


class StateError(RuntimeError):
    """The model or checkpoint is in the wrong stage for the requested operation."""


@dataclass(frozen=True)
class Toggles:
    vsi_enabled: bool = True
    sta_enabled: bool = True
    adapters_enabled: bool = False
    hard_negatives_enabled: bool = True
    stage2_mapping_enabled: bool = True

    def to_dict(self) -> dict[str, bool]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def trainable_names(names, stage: str) -> set[str]:
    prefixes = FREEZE_POLICY[stage]
    return {n for n in names if n.startswith(prefixes)}


class TSCIRModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.image = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.mapping = MappingNetwork(d)
        self.patch_proj = PatchProjection(d, cfg.num_patches)
        self.vsi = nn.ModuleDict(
            {str(i): VsiBlock(d, cfg.latent_dim, i) for i in cfg.vsi_layers}
        )
        self.adapter = nn.ModuleDict(
            {
                str(i): ComposingAdapter(d, cfg.adapter_dim, i, cfg.adapter_activation)
                for i in cfg.adapter_layers
            }
        )
        self.toggles = Toggles()
        self.stage = "init"
        self.last_injections: list[int] = []
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        init_parameters(self, gen)
        for block in self.vsi.values():
            block.zero_up_projection()
        for adapter in self.adapter.values():
            adapter.zero_up_projection()

    @property
    def dtype(self) -> torch.dtype:
        return self.text.proj.dtype

    def require_stage1(self) -> None:
        if self.stage not in ("stage1", "stage2"):
            raise StateError(f"model holds {self.stage!r} weights; a Stage-I checkpoint is required")

    def pseudo_text(
        self,
        v_g: torch.Tensor,
        V: torch.Tensor,
        ids: torch.Tensor,
        eos: torch.Tensor,
        slots: torch.Tensor,
    ) -> TextFeatures:
        """Text tower over template tokens with the mapped pseudo token spliced at `slots`."""
        w = self.mapping(v_g)
        use_vsi = self.toggles.vsi_enabled and len(self.vsi) > 0
        use_adapters = self.toggles.adapters_enabled and len(self.adapter) > 0
        V_bar = self.patch_proj(V) if use_vsi else None
        injected: list[int] = []

        def hook(layer: int, x: torch.Tensor) -> torch.Tensor:
            key = str(layer)
            if use_vsi and key in self.vsi:
                x, did = vsi_inject(x, slots, eos, V_bar, self.vsi[key])
                if did:
                    injected.append(layer)
            if use_adapters and key in self.adapter:
                x = self.adapter[key](x)
            return x

        feats = self.text(ids, eos, w, slots, hook if (use_vsi or use_adapters) else None)
        self.last_injections = injected
        return feats

    # -- parameter bookkeeping -------------------------------------------------------

    def parameter_groups(self) -> dict[str, int]:
        """Parameter counts per top-level group."""
        counts: dict[str, int] = {}
        for name, p in self.named_parameters():
            group = name.split(".", 1)[0]
            counts[group] = counts.get(group, 0) + p.numel()
        return counts

    def apply_freeze(self, stage: str) -> set[str]:
        """Set requires_grad per the freeze policy; returns the trainable names."""
        names = trainable_names((n for n, _ in self.named_parameters()), stage)
        for n, p in self.named_parameters():
            p.requires_grad_(n in names)
        return names


def build_model(cfg: ModelConfig) -> TSCIRModel:
    return TSCIRModel(cfg)


def set_ablation(model: TSCIRModel, toggles: Toggles | dict, stage: int | None = None) -> TSCIRModel:
    """Apply component toggles; adapters cannot be enabled for Stage-I training."""
    if isinstance(toggles, dict):
        unknown = set(toggles) - {f.name for f in fields(Toggles)}
        if unknown:
            raise ConfigError(f"unknown toggles {sorted(unknown)}")
        toggles = replace(model.toggles, **toggles)
    if stage == 1 and toggles.adapters_enabled:
        raise ConfigError("adapters cannot be enabled during Stage I")
    model.toggles = toggles
    return model


@dataclass
class ParameterSet:
    """Named float32 arrays with a trainable flag per name."""

    arrays: dict[str, np.ndarray]
    trainable: dict[str, bool]

    def __post_init__(self):
        if set(self.arrays) != set(self.trainable):
            raise ValueError("trainable mask must cover exactly the parameter names")

    @classmethod
    def from_model(cls, model: nn.Module, stage: str | None = None) -> "ParameterSet":
        names = [n for n, _ in model.named_parameters()]
        train = trainable_names(names, stage) if stage in FREEZE_POLICY else set()
        arrays = {
            n: p.detach().to(torch.float32).numpy().copy() for n, p in model.named_parameters()
        }
        return cls(arrays, {n: n in train for n in names})

    def load_into(self, model: nn.Module) -> None:
        params = dict(model.named_parameters())
        if set(params) != set(self.arrays):
            missing = sorted(set(params) ^ set(self.arrays))
            raise StateError(f"parameter names do not match the model: {missing[:5]}")
        with torch.no_grad():
            for n, p in params.items():
                arr = self.arrays[n]
                if tuple(arr.shape) != tuple(p.shape):
                    raise StateError(f"shape mismatch for {n}: {arr.shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr))

    def digest(self, names=None) -> str:
        """SHA-256 over the raw bytes of the selected arrays (all by default)."""
        h = hashlib.sha256()
        for n in sorted(self.arrays if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.arrays[n], dtype="<f4").tobytes())
        return h.hexdigest()

    def count(self, prefix: str = "") -> int:
        return sum(a.size for n, a in self.arrays.items() if n.startswith(prefix))
