"""Small CLIP-shaped dual encoder: a patch transformer and a causal token transformer."""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig
from .tokenizer import PAD, TokenSequence

INIT_STD = 0.02

LayerHook = Callable[[int, torch.Tensor], torch.Tensor]


class VisualFeatures(NamedTuple):
    v_g: torch.Tensor  # (..., d) global feature from the class token
    V: torch.Tensor  # (..., m, d) patch features


class TextFeatures(NamedTuple):
    S: torch.Tensor  # (..., n, d) final-layer token states
    s_g: torch.Tensor  # (..., d) projected summary (EOS) state
    s_w: torch.Tensor | None  # (..., d) final state at the pseudo slot


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded normal(0, 0.02) for weights and embeddings, zeros for biases, unit LayerNorm gains."""
    norms = {name for name, m in module.named_modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, p in module.named_parameters():
            owner, _, leaf = name.rpartition(".")
            if owner in norms:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=generator, dtype=torch.float64) * INIT_STD)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if bias is not None:
            scores = scores + bias
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.cls = nn.Parameter(torch.zeros(d))
        self.pos = nn.Parameter(torch.zeros(cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads) for _ in range(cfg.num_layers_img))
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Parameter(torch.zeros(d, d))

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, c = images.shape
        s, p = self.cfg.image_size, self.cfg.patch_size
        if (h, w, c) != (s, s, 3):
            raise ConfigError(f"expected images of shape ({s}, {s}, 3), got {(h, w, c)}")
        g = s // p
        x = images.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * 3)

    def forward(self, images: torch.Tensor) -> VisualFeatures:
        x = self.patch_embed(self.patchify(images))
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos
        for block in self.blocks:
            x = block(x)
        x = self.ln_post(x) @ self.proj
        return VisualFeatures(x[:, 0], x[:, 1:])


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos = nn.Parameter(torch.zeros(cfg.max_tokens, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads) for _ in range(cfg.num_layers_txt))
        self.ln_final = nn.LayerNorm(d)
        self.proj = nn.Parameter(torch.zeros(d, d))

    def embed(
        self,
        ids: torch.Tensor,
        pseudo: torch.Tensor | None = None,
        slots: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Token embeddings with `pseudo` rows spliced in at `slots`, plus positions."""
        e = self.token_embed(ids)
        if pseudo is not None:
            at_slot = torch.arange(ids.shape[1]) == slots[:, None]
            e = torch.where(at_slot[..., None], pseudo[:, None, :], e)
        return e + self.pos[: ids.shape[1]]

    @staticmethod
    def attention_bias(ids: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        """Additive causal + key-padding mask of shape (B, 1, n, n)."""
        n = ids.shape[1]
        allowed = torch.ones(n, n, dtype=torch.bool).tril() & (ids != PAD)[:, None, None, :]
        bias = torch.zeros(allowed.shape, dtype=dtype)
        return bias.masked_fill(~allowed, float("-inf"))

    def forward(
        self,
        ids: torch.Tensor,
        eos: torch.Tensor,
        pseudo: torch.Tensor | None = None,
        slots: torch.Tensor | None = None,
        hook: LayerHook | None = None,
    ) -> TextFeatures:
        n = self.cfg.max_tokens
        if ids.shape[1] > n:
            raise ValueError(f"sequence of {ids.shape[1]} tokens exceeds max_tokens={n}")
        if ids.shape[1] < n:
            # a fixed length keeps trailing padding from perturbing the arithmetic
            ids = F.pad(ids, (0, n - ids.shape[1]), value=PAD)
        x = self.embed(ids, pseudo, slots)
        bias = self.attention_bias(ids, x.dtype)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, bias)
            if hook is not None:
                x = hook(i, x)
        S = self.ln_final(x)
        rows = torch.arange(ids.shape[0])
        s_g = S[rows, eos] @ self.proj
        s_w = S[rows, slots] if slots is not None else None
        return TextFeatures(S, s_g, s_w)


def batch_tokens(seqs: Sequence[TokenSequence], max_tokens: int):
    """Pad sequences to `max_tokens`; returns (ids, eos positions, pseudo slots or None)."""
    for s in seqs:
        if len(s) > max_tokens:
            raise ValueError(f"sequence of {len(s)} tokens exceeds max_tokens={max_tokens}")
    ids = torch.tensor([s.padded(max_tokens).token_ids for s in seqs], dtype=torch.long)
    eos = torch.tensor([s.eos_index for s in seqs], dtype=torch.long)
    if all(s.pseudo_slot is not None for s in seqs):
        slots = torch.tensor([s.pseudo_slot for s in seqs], dtype=torch.long)
    elif any(s.pseudo_slot is not None for s in seqs):
        raise ValueError("mixed batches of pseudo and plain sequences are not supported")
    else:
        slots = None
    return ids, eos, slots


def as_image_batch(images, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    t = t.to(dtype)
    if t.ndim == 3:
        return t.unsqueeze(0), True
    return t, False


def encode_image(encoder: ImageEncoder, image) -> VisualFeatures:
    """Global and patch features for one (H, W, 3) image or a (B, H, W, 3) batch."""
    dtype = encoder.proj.dtype
    batch, single = as_image_batch(image, dtype)
    feats = encoder(batch)
    if single:
        return VisualFeatures(feats.v_g[0], feats.V[0])
    return feats


def encode_text_plain(encoder: TextEncoder, tokens: TokenSequence | Sequence[TokenSequence]) -> TextFeatures:
    """Run the text tower with no pseudo token, injection or adapters."""
    single = isinstance(tokens, TokenSequence)
    seqs = [tokens] if single else list(tokens)
    ids, eos, _ = batch_tokens(seqs, encoder.cfg.max_tokens)
    feats = encoder(ids, eos)
    if single:
        return TextFeatures(feats.S[0], feats.s_g[0], None)
    return TextFeatures(feats.S, feats.s_g, None)
