"""Training objectives and hard-negative synthesis.

All similarity-based losses expect unit-norm rows and take ``scale``, the
multiplier applied to cosine similarities (``1/tau`` under the default
convention, see :meth:`LossConfig.scale`).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import LossConfig

UNIT_TOL = 1e-6
Q_FLOOR = 1e-12
DEGENERATE_RANGE = 1e-12


class ContractError(ValueError):
    """Inputs violate a loss precondition (e.g. rows not unit-normalized)."""


def check_unit_rows(X: torch.Tensor, name: str = "features") -> None:
    norms = X.detach().to(torch.float64).norm(dim=-1)
    if norms.numel() and (norms - 1).abs().max() > UNIT_TOL:
        raise ContractError(f"{name} rows must be unit-normalized (max |norm-1| = "
                            f"{(norms - 1).abs().max().item():.2e})")


def normalize(X: torch.Tensor) -> torch.Tensor:
    return F.normalize(X, dim=-1)


def contrastive_loss(
    U: torch.Tensor,
    O: torch.Tensor,
    scale: float,
    extra_negatives: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean InfoNCE of matching row i of `U` with row i of `O` against all rows of `O`.

    `extra_negatives` (B, k, d) adds k more candidates to the denominator of
    each row.
    """
    check_unit_rows(U, "U")
    check_unit_rows(O, "O")
    if U.shape != O.shape:
        raise ContractError(f"shape mismatch {tuple(U.shape)} vs {tuple(O.shape)}")
    logits = scale * (U @ O.T)
    positives = logits.diagonal()
    if extra_negatives is not None and extra_negatives.shape[1] > 0:
        if extra_negatives.shape[0] != U.shape[0] or extra_negatives.shape[2] != U.shape[1]:
            raise ValueError(f"hard negatives of shape {tuple(extra_negatives.shape)} do not "
                             f"match features {tuple(U.shape)}")
        check_unit_rows(extra_negatives, "hard negatives")
        logits = torch.cat([logits, scale * torch.einsum("bd,bkd->bk", U, extra_negatives)], 1)
    return (torch.logsumexp(logits, dim=1) - positives).mean()


def mapping_loss(S: torch.Tensor, V: torch.Tensor, scale: float) -> torch.Tensor:
    return contrastive_loss(S, V, scale) + contrastive_loss(V, S, scale)


def soft_alignment_loss(
    v_g: torch.Tensor, s_g: torch.Tensor, c_g: torch.Tensor, scale: float
) -> torch.Tensor:
    """Batch-mean KL(P_i || Q_i) between image->caption and text->caption softmaxes."""
    for name, X in (("v_g", v_g), ("s_g", s_g), ("c_g", c_g)):
        check_unit_rows(X, name)
    log_p = torch.log_softmax(scale * (v_g @ c_g.T), dim=1)
    log_q = torch.log_softmax(scale * (s_g @ c_g.T), dim=1)
    # Both logs share the 1e-12 floor, so identical rows give exactly zero;
    # flooring log P moves the value by at most Q_FLOOR / e per entry.
    floor = math.log(Q_FLOOR)
    kl = log_p.exp() * (log_p.clamp_min(floor) - log_q.clamp_min(floor))
    return kl.sum(dim=1).mean()


def stage1_loss(
    v_g: torch.Tensor,
    s_g: torch.Tensor,
    c_g: torch.Tensor,
    cfg: LossConfig,
    sta_enabled: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    scale = cfg.scale(1)
    l_map = mapping_loss(s_g, v_g, scale)
    l_sta = soft_alignment_loss(v_g, s_g, c_g, scale) if sta_enabled else torch.zeros((), dtype=l_map.dtype)
    total = l_map + cfg.alpha * l_sta
    return total, {"L_map": l_map.item(), "L_sta": l_sta.item(), "total": total.item()}


def mixing_weights(
    similarities: torch.Tensor, beta_clamp_max: float = 0.9, beta_degenerate_value: float = 0.5
) -> torch.Tensor:
    """Min-max normalized similarities, clamped above at `beta_clamp_max`."""
    lo, hi = similarities.min(), similarities.max()
    if hi - lo < DEGENERATE_RANGE:
        beta = torch.full_like(similarities, beta_degenerate_value)
    else:
        beta = (similarities - lo) / (hi - lo)
    return beta.clamp(max=beta_clamp_max)


def mine_hard_negatives(
    z_cg: torch.Tensor,
    t_gt: torch.Tensor,
    candidates: torch.Tensor,
    k: int,
    beta_clamp_max: float = 0.9,
    beta_degenerate_value: float = 0.5,
    return_beta: bool = False,
):
    """Interpolate the ground-truth target with the query's k nearest candidates.

    `candidates` must already exclude the ground-truth row. Candidates are
    ranked by similarity to `z_cg` (ties by lower index), mixing weights are
    the min-max normalized similarities to `t_gt`, clamped at
    `beta_clamp_max`; when all k similarities coincide every weight is
    `beta_degenerate_value`. Mixtures are renormalized to unit length.
    """
    if k > candidates.shape[0]:
        raise ValueError(f"k={k} exceeds the {candidates.shape[0]} available candidates")
    if k == 0:
        empty = candidates[:0]
        return (empty, candidates.new_zeros(0)) if return_beta else empty
    sims = candidates @ z_cg
    order = torch.sort(-sims, stable=True).indices[:k]
    chosen = candidates[order]
    beta = mixing_weights(chosen @ t_gt, beta_clamp_max, beta_degenerate_value)
    mixed = beta[:, None] * t_gt[None, :] + (1 - beta[:, None]) * chosen
    mixed = normalize(mixed)
    return (mixed, beta) if return_beta else mixed


@torch.no_grad()
def mine_batch_hard_negatives(Z: torch.Tensor, T: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Hard negatives for every row of a batch, drawn from the other rows of `T`.

    Returns a (B, k, d) tensor with k = cfg.hard_negative_k.
    """
    B = Z.shape[0]
    out = []
    for i in range(B):
        others = torch.cat([T[:i], T[i + 1 :]])
        out.append(mine_hard_negatives(Z[i], T[i], others, cfg.hard_negative_k,
                                       cfg.beta_clamp_max, cfg.beta_degenerate_value))
    return torch.stack(out)


def composed_loss(
    z_cg: torch.Tensor,
    t_g: torch.Tensor,
    hard_negatives: torch.Tensor | None,
    scale: float,
) -> torch.Tensor:
    """Symmetric contrastive loss; hard negatives widen only the text-to-image direction."""
    return contrastive_loss(z_cg, t_g, scale, hard_negatives) + contrastive_loss(t_g, z_cg, scale)


def stage2_loss(
    z_cg: torch.Tensor,
    t_g: torch.Tensor,
    z_mg: torch.Tensor,
    v_g: torch.Tensor,
    c_g: torch.Tensor,
    hard_negatives: torch.Tensor | None,
    cfg: LossConfig,
    sta_enabled: bool = True,
    mapping_enabled: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    scale = cfg.scale(2)
    l_comp = composed_loss(z_cg, t_g, hard_negatives, scale)
    zero = torch.zeros((), dtype=l_comp.dtype)
    l_map = mapping_loss(z_mg, v_g, scale) if mapping_enabled else zero
    l_sta = (soft_alignment_loss(v_g, z_mg, c_g, scale)
             if (mapping_enabled and sta_enabled) else zero)
    total = l_comp + l_map + cfg.alpha * l_sta
    return total, {
        "L_comp": l_comp.item(),
        "L_map": l_map.item(),
        "L_sta": l_sta.item(),
        "total": total.item(),
    }
