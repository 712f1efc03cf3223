"""Composing adapters and the composed / mapped query encoders."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .inversion import P1, P2, encode_with_pseudo


class ComposingAdapter(nn.Module):
    """Residual bottleneck ``Z + up(act(down(Z)))`` applied to every token row."""

    def __init__(self, dim: int, adapter_dim: int, layer_index: int, activation: str = "silu"):
        super().__init__()
        self.layer_index = layer_index
        self.activation = activation
        self.down = nn.Linear(dim, adapter_dim)
        self.up = nn.Linear(adapter_dim, dim)
        self.zero_up_projection()

    def zero_up_projection(self) -> None:
        with torch.no_grad():
            self.up.weight.zero_()
            self.up.bias.zero_()

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        h = self.down(Z)
        if self.activation == "silu":
            h = F.silu(h)
        return Z + self.up(h)


def adapter_forward(Z: torch.Tensor, adapter: ComposingAdapter) -> torch.Tensor:
    return adapter(Z)


def adapter_parameter_count(dim: int, adapter_dim: int) -> int:
    return 2 * dim * adapter_dim + adapter_dim + dim


def encode_composed(model, reference_images, modifications) -> torch.Tensor:
    """Composed query feature: template P2, adapters applied when the model enables them."""
    model.require_stage1()
    return encode_with_pseudo(model, reference_images, P2, modifications).s_g


def encode_mapping(model, reference_images) -> torch.Tensor:
    """Mapped image feature: template P1, adapters applied when the model enables them."""
    model.require_stage1()
    return encode_with_pseudo(model, reference_images, P1).s_g
