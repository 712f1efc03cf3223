"""Image-to-pseudo-word mapping and visual semantic injection (VSI)."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError
from .encoders import TextFeatures, as_image_batch, batch_tokens
from .tokenizer import PLACEHOLDER, TokenSequence, tokenize


class MappingNetwork(nn.Module):
    """Three-layer perceptron turning a global image feature into a pseudo-word token.

    ``linear=True`` drops the nonlinearities; it exists for exact probes in tests.
    """

    def __init__(self, dim: int, linear: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, dim)
        self.linear = linear

    def forward(self, v_g: torch.Tensor) -> torch.Tensor:
        act = (lambda t: t) if self.linear else F.gelu
        return self.fc3(act(self.fc2(act(self.fc1(v_g)))))


def map_to_pseudo_token(mapping: MappingNetwork, v_g: torch.Tensor) -> torch.Tensor:
    return mapping(v_g)


class PatchProjection(nn.Module):
    """3x3 same-padded convolution over the patch grid, then a per-patch perceptron."""

    def __init__(self, dim: int, num_patches: int, linear: bool = False):
        super().__init__()
        grid = math.isqrt(num_patches)
        if grid * grid != num_patches:
            raise ConfigError(f"patch count {num_patches} is not a perfect square")
        self.grid = grid
        self.conv = nn.Conv2d(dim, dim, kernel_size=3, stride=1, padding=1)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.linear = linear

    def forward(self, V: torch.Tensor) -> torch.Tensor:
        single = V.ndim == 2
        if single:
            V = V.unsqueeze(0)
        b, m, d = V.shape
        if m != self.grid**2:
            raise ConfigError(f"expected {self.grid**2} patches, got {m}")
        x = V.transpose(1, 2).reshape(b, d, self.grid, self.grid)
        x = self.conv(x).reshape(b, d, m).transpose(1, 2)
        h = self.fc1(x)
        out = self.fc2(h if self.linear else F.gelu(h))
        return out[0] if single else out


def project_patches(proj: PatchProjection, V: torch.Tensor) -> torch.Tensor:
    return proj(V)


class VsiBlock(nn.Module):
    """Cross-attention from the pseudo-word state to projected patches at one text layer.

    The up-projection starts at zero, so a fresh block leaves its input unchanged.
    """

    def __init__(self, dim: int, latent_dim: int, layer_index: int):
        super().__init__()
        self.layer_index = layer_index
        self.latent_dim = latent_dim
        self.psi_v = nn.Linear(dim, latent_dim)
        self.psi_w = nn.Linear(dim, latent_dim)
        self.psi_g = nn.Linear(dim, latent_dim)
        self.q = nn.Linear(latent_dim, latent_dim)
        self.k = nn.Linear(latent_dim, latent_dim)
        self.v = nn.Linear(latent_dim, latent_dim)
        self.psi_u = nn.Linear(latent_dim, dim)
        self.zero_up_projection()

    def zero_up_projection(self) -> None:
        with torch.no_grad():
            self.psi_u.weight.zero_()
            self.psi_u.bias.zero_()

    def injection(self, s_w: torch.Tensor, s_g: torch.Tensor, V_bar: torch.Tensor) -> torch.Tensor:
        """Replacement value for the pseudo-word row: psi_u(c) + s_w."""
        H_v = self.psi_v(V_bar)  # (B, m, L)
        query = self.q(self.psi_w(s_w) + self.psi_g(s_g))  # (B, L)
        keys, values = self.k(H_v), self.v(H_v)
        scores = torch.einsum("bl,bml->bm", query, keys) / math.sqrt(self.latent_dim)
        c = torch.einsum("bm,bml->bl", scores.softmax(dim=-1), values)
        return self.psi_u(c) + s_w


def vsi_inject(
    layer_states: torch.Tensor,
    pseudo_slot: torch.Tensor | int | None,
    summary: torch.Tensor | int,
    V_bar: torch.Tensor,
    block: VsiBlock,
) -> tuple[torch.Tensor, bool]:
    """Inject patch semantics into the pseudo-word row of one layer's states.

    Accepts a single (n, d) sequence or a (B, n, d) batch. Returns the new
    states and whether an injection happened; without a pseudo slot the block
    is the identity.
    """
    if pseudo_slot is None:
        return layer_states, False
    single = layer_states.ndim == 2
    if single:
        layer_states, V_bar = layer_states.unsqueeze(0), V_bar.unsqueeze(0)
    b, n, _ = layer_states.shape
    slot = torch.as_tensor(pseudo_slot).reshape(-1).expand(b)
    summ = torch.as_tensor(summary).reshape(-1).expand(b)
    rows = torch.arange(b)
    new_row = block.injection(layer_states[rows, slot], layer_states[rows, summ], V_bar)
    at_slot = (torch.arange(n) == slot[:, None])[..., None]
    out = torch.where(at_slot, new_row[:, None, :], layer_states)
    return (out[0] if single else out), True


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str

    def __post_init__(self):
        if self.pattern.count(PLACEHOLDER) != 1:
            raise ConfigError(f"template {self.pattern!r} must contain exactly one {PLACEHOLDER!r}")
        if self.pattern.count("{T}") > 1:
            raise ConfigError(f"template {self.pattern!r} has more than one {{T}} slot")

    @property
    def takes_modification(self) -> bool:
        return "{T}" in self.pattern


P1 = PromptTemplate("a photo of $")
P2 = PromptTemplate("a photo of $ that {T}")


def expand_template(
    template: PromptTemplate | str, modification: str | None = None, max_tokens: int = 20
) -> TokenSequence:
    if isinstance(template, str):
        template = PromptTemplate(template)
    if template.takes_modification:
        if not modification or not modification.strip():
            raise ValueError(f"template {template.pattern!r} needs a modification text")
        text = template.pattern.replace("{T}", modification)
    else:
        if modification:
            raise ValueError(f"template {template.pattern!r} takes no modification text")
        text = template.pattern
    text = re.sub(r"\s+", " ", text)
    tokens = tokenize(text, max_tokens)
    if tokens.pseudo_slot is None:
        raise ValueError("placeholder was truncated away; raise max_tokens")
    return tokens


def encode_with_pseudo(model, images, template: PromptTemplate | str, modifications=None):
    """Full pseudo-word pipeline for one image or a batch.

    Image features feed the mapping network; the resulting token is spliced
    at the template's placeholder and the text tower runs with VSI (and
    composing adapters) hooked in according to the model's toggles.
    """
    batch, single = as_image_batch(images, model.dtype)
    if modifications is None or isinstance(modifications, str):
        modifications = [modifications] * batch.shape[0]
    seqs = [expand_template(template, m, model.cfg.max_tokens) for m in modifications]
    ids, eos, slots = batch_tokens(seqs, model.cfg.max_tokens)
    vis = model.image(batch)
    feats = model.pseudo_text(vis.v_g, vis.V, ids, eos, slots)
    if single:
        return TextFeatures(feats.S[0], feats.s_g[0], feats.s_w[0])
    return feats
