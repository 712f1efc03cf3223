"""Backbone pretraining and the Stage-I / Stage-II training loops."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, TextIO

import numpy as np
import torch

from . import toydata
from .checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint
from .config import BackboneConfig, ConfigError, LossConfig, ModelConfig, TrainConfig
from .encoders import batch_tokens
from .inversion import P1, P2, expand_template
from .model import StateError, Toggles, TSCIRModel, set_ablation
from .objectives import (
    contrastive_loss,
    mine_batch_hard_negatives,
    normalize,
    stage1_loss,
    stage2_loss,
)
from .tokenizer import tokenize

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class StageResult:
    model: TSCIRModel
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)

    def epoch_means(self, key: str = "total") -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for rec in self.history:
            by_epoch.setdefault(rec["epoch"], []).append(rec[key])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seed-ordered minibatches; the trailing partial batch is dropped."""
    if n <= batch_size:
        return [rng.permutation(n)]
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def _optimizer(params, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay,
                             betas=ADAM_BETAS, eps=ADAM_EPS)


def _emit(rec: dict, history: list, log: TextIO | Callable | None) -> None:
    history.append(rec)
    if log is None:
        return
    if callable(log):
        log(rec)
    else:
        log.write(json.dumps(rec, sort_keys=True) + "\n")


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, batch: int, seed: int,
                  idx: np.ndarray) -> None:
    if not math.isfinite(loss.item()):
        raise TrainingError(
            f"non-finite {stage} loss at epoch {epoch}, batch {batch} "
            f"(seed {seed}, sample indices {idx.tolist()[:8]}...)"
        )


@torch.no_grad()
def _image_features(model: TSCIRModel, specs: Sequence[toydata.SceneSpec], chunk: int = 256):
    v_g, V = [], []
    for start in range(0, len(specs), chunk):
        images = torch.from_numpy(toydata.render_batch(specs[start:start + chunk],
                                                       model.cfg.image_size))
        feats = model.image(images.to(model.dtype))
        v_g.append(feats.v_g)
        V.append(feats.V)
    return torch.cat(v_g), torch.cat(V)


@torch.no_grad()
def _caption_features(model: TSCIRModel, captions: Sequence[str], chunk: int = 256):
    out = []
    for start in range(0, len(captions), chunk):
        seqs = [tokenize(c, model.cfg.max_tokens) for c in captions[start:start + chunk]]
        ids, eos, _ = batch_tokens(seqs, model.cfg.max_tokens)
        out.append(model.text(ids, eos).s_g)
    return torch.cat(out)


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state}


# ------------------------------------------------------------------------- backbone


def pretrain_backbone(
    pairs: Sequence[tuple[toydata.SceneSpec, str]],
    model_cfg: ModelConfig,
    cfg: BackboneConfig = BackboneConfig(),
    log: TextIO | Callable | None = None,
) -> StageResult:
    """Contrastive image-caption pretraining of both towers (stand-in for a pretrained CLIP)."""
    if not pairs:
        raise ValueError("empty dataset")
    model = TSCIRModel(model_cfg)
    model.apply_freeze("backbone")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = _optimizer(params, cfg.learning_rate, cfg.weight_decay)
    warmup = max(1, cfg.warmup_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warmup))
    rng = np.random.default_rng(cfg.seed)
    specs = [s for s, _ in pairs]
    seqs = [tokenize(c, model_cfg.max_tokens) for _, c in pairs]
    images = torch.from_numpy(toydata.render_batch(specs, model_cfg.image_size))
    scale = 1.0 / cfg.tau
    history: list[dict] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(pairs), cfg.batch_size, rng)):
            v = normalize(model.image(images[idx]).v_g)
            ids, eos, _ = batch_tokens([seqs[i] for i in idx], model_cfg.max_tokens)
            t = normalize(model.text(ids, eos).s_g)
            loss = contrastive_loss(v, t, scale) + contrastive_loss(t, v, scale)
            _check_finite(loss, "backbone", epoch, b, cfg.seed, idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            sched.step()
            _emit({"stage": "backbone", "epoch": epoch, "step": step, "total": loss.item()},
                  history, log)
            step += 1
    model.eval()
    model.stage = "backbone"
    model.apply_freeze("stage1")
    return StageResult(model, checkpoint_from_model(model, "backbone", _rng_state(rng)), history)


# -------------------------------------------------------------------------- stage I


def run_stage1(
    init: Checkpoint | TSCIRModel,
    pairs: Sequence[tuple[toydata.SceneSpec, str]],
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    log: TextIO | Callable | None = None,
) -> StageResult:
    """Train the mapping network, patch projection and VSI blocks on image-caption pairs."""
    if cfg.stage != 1:
        raise ConfigError("run_stage1 needs a stage-1 TrainConfig")
    if not pairs:
        raise ValueError("empty dataset")
    if isinstance(init, Checkpoint):
        model = model_from_checkpoint(init, expect=("backbone", "stage1"))
    else:
        model = init
    set_ablation(model, Toggles(vsi_enabled=cfg.vsi_enabled, sta_enabled=cfg.sta_enabled,
                                adapters_enabled=False,
                                hard_negatives_enabled=cfg.hard_negatives_enabled,
                                stage2_mapping_enabled=cfg.stage2_mapping_enabled), stage=1)
    model.apply_freeze("stage1")
    model.train()

    v_g, V = _image_features(model, [s for s, _ in pairs])
    c_g = normalize(_caption_features(model, [c for _, c in pairs]))
    v_g_unit = normalize(v_g)
    prompt = expand_template(P1, None, model.cfg.max_tokens)
    opt = _optimizer([p for p in model.parameters() if p.requires_grad],
                     cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(pairs), cfg.batch_size, rng)):
            ids, eos, slots = batch_tokens([prompt] * len(idx), model.cfg.max_tokens)
            s_g = normalize(model.pseudo_text(v_g[idx], V[idx], ids, eos, slots).s_g)
            loss, parts = stage1_loss(v_g_unit[idx], s_g, c_g[idx], loss_cfg, cfg.sta_enabled)
            _check_finite(loss, "stage1", epoch, b, cfg.seed, idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            _emit({"stage": 1, "epoch": epoch, "step": step, "L_comp": 0.0, **parts},
                  history, log)
            step += 1
    model.eval()
    model.stage = "stage1"
    return StageResult(model, checkpoint_from_model(model, "stage1", _rng_state(rng)), history)


# ------------------------------------------------------------------------- stage II


def run_stage2(
    stage1: Checkpoint,
    triplets: Sequence[toydata.TripletRecord],
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    log: TextIO | Callable | None = None,
) -> StageResult:
    """Train the composing adapters on triplets; everything else stays at its Stage-I value."""
    if cfg.stage != 2:
        raise ConfigError("run_stage2 needs a stage-2 TrainConfig")
    if not isinstance(stage1, Checkpoint) or stage1.stage != "stage1":
        tag = getattr(stage1, "stage", None)
        raise StateError(f"Stage II needs a checkpoint tagged 'stage1' (got {tag!r})")
    if not triplets:
        raise ValueError("empty dataset")
    k = loss_cfg.hard_negative_k if cfg.hard_negatives_enabled else 0
    if k and k >= min(cfg.batch_size, len(triplets)):
        raise ConfigError(f"hard_negative_k={k} must be smaller than the batch size")
    loss_cfg = replace(loss_cfg, hard_negative_k=k)

    model = model_from_checkpoint(stage1)
    set_ablation(model, Toggles(vsi_enabled=stage1.toggles.vsi_enabled and cfg.vsi_enabled,
                                sta_enabled=cfg.sta_enabled, adapters_enabled=True,
                                hard_negatives_enabled=cfg.hard_negatives_enabled,
                                stage2_mapping_enabled=cfg.stage2_mapping_enabled), stage=2)
    model.apply_freeze("stage2")
    model.train()

    ref_v, ref_V = _image_features(model, [t.reference for t in triplets])
    tgt_v, _ = _image_features(model, [t.target for t in triplets])
    t_g = normalize(tgt_v)
    v_g_unit = normalize(ref_v)
    c_g = normalize(_caption_features(model, [t.reference_caption for t in triplets]))
    composed = [expand_template(P2, t.modification, model.cfg.max_tokens) for t in triplets]
    mapped = expand_template(P1, None, model.cfg.max_tokens)

    opt = _optimizer([p for p in model.parameters() if p.requires_grad],
                     cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(triplets), cfg.batch_size, rng)):
            ids, eos, slots = batch_tokens([composed[i] for i in idx], model.cfg.max_tokens)
            z_cg = normalize(model.pseudo_text(ref_v[idx], ref_V[idx], ids, eos, slots).s_g)
            if cfg.stage2_mapping_enabled:
                ids, eos, slots = batch_tokens([mapped] * len(idx), model.cfg.max_tokens)
                z_mg = normalize(model.pseudo_text(ref_v[idx], ref_V[idx], ids, eos, slots).s_g)
            else:
                z_mg = v_g_unit[idx]
            negatives = mine_batch_hard_negatives(z_cg.detach(), t_g[idx], loss_cfg) if k else None
            loss, parts = stage2_loss(z_cg, t_g[idx], z_mg, v_g_unit[idx], c_g[idx], negatives,
                                      loss_cfg, cfg.sta_enabled, cfg.stage2_mapping_enabled)
            _check_finite(loss, "stage2", epoch, b, cfg.seed, idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            _emit({"stage": 2, "epoch": epoch, "step": step, **parts}, history, log)
            step += 1
    model.eval()
    model.stage = "stage2"
    return StageResult(model, checkpoint_from_model(model, "stage2", _rng_state(rng)), history)
