"""Toy ablation benchmark: stage ordering, component chain and alpha sensitivity.

One backbone is pretrained once and shared by every seed, the way a single
pretrained dual encoder underlies every configuration. Each seed draws its own
split and training order.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from . import toydata
from .config import BackboneConfig, LossConfig, ModelConfig, TrainConfig
from .retrieval import evaluate_cir, format_table
from .training import StageResult, pretrain_backbone, run_stage1, run_stage2

BACKBONE_PAIRS = 2048
BACKBONE_DATA_SEED = 999

STAGE_ROWS = ("Baseline", "Stage II-only", "Stage I-only", "Stage I+II")
COMPONENT_ROWS = ("Baseline", "+VSI", "+L_sta", "+CA", "+HNL")
ALPHA_ROWS = ("alpha=0", "alpha=0.2", "alpha=0.6")


@dataclass(frozen=True)
class BenchmarkSettings:
    seeds: tuple[int, ...] = (0, 1, 2)
    n_pairs: int = 512
    n_triplets: int = 1024
    gallery_size: int = 256
    n_queries: int = 512
    stage1_lr: float = 1e-3
    stage1_epochs: int = 20
    stage2_lr: float = 3e-3
    stage2_epochs: int = 10
    batch_size: int = 32
    alphas: tuple[float, ...] = (0.0, 0.2, 0.6)
    model: ModelConfig = ModelConfig()
    backbone: BackboneConfig = BackboneConfig()


@dataclass
class BenchmarkResult:
    settings: BenchmarkSettings
    per_seed: dict[int, dict[str, dict[str, float]]]
    seconds: float

    def median(self, row: str, metric: str = "R@1") -> float:
        return statistics.median(self.per_seed[s][row][metric] for s in self.per_seed)

    def medians(self, rows: Sequence[str]) -> list[tuple[str, dict[str, float]]]:
        metrics = next(iter(self.per_seed.values()))[rows[0]].keys()
        return [(r, {m: self.median(r, m) for m in metrics}) for r in rows]

    def tables(self) -> str:
        cols = ["R@1", "R@5", "R@10", "R@50"]
        parts = [
            ("Stage ablation", STAGE_ROWS),
            ("Component ablation", COMPONENT_ROWS),
            ("Sensitivity to alpha", ALPHA_ROWS),
        ]
        out = []
        for title, rows in parts:
            out.append(f"{title} (median over seeds {list(self.per_seed)})")
            out.append(format_table(self.medians(rows), cols))
            out.append("")
        out.append(f"total {self.seconds:.1f}s")
        return "\n".join(out)


def _alpha_row(alpha: float) -> str:
    return f"alpha={alpha:g}"


def run_seed(backbone: StageResult, seed: int, settings: BenchmarkSettings,
             log: Callable[[str], None] | None = None) -> dict[str, dict[str, float]]:
    split = toydata.make_split(seed, n_pairs=settings.n_pairs, n_triplets=settings.n_triplets,
                               gallery_size=settings.gallery_size, n_queries=settings.n_queries)

    def evaluate(result: StageResult) -> dict[str, float]:
        return evaluate_cir(result.model, split.queries, split.gallery)

    def stage1(alpha: float, vsi: bool, epochs: int | None = None) -> StageResult:
        cfg = TrainConfig(stage=1, learning_rate=settings.stage1_lr, batch_size=settings.batch_size,
                          epochs=settings.stage1_epochs if epochs is None else epochs, seed=seed,
                          vsi_enabled=vsi, sta_enabled=alpha > 0)
        return run_stage1(backbone.checkpoint, split.pairs, cfg, LossConfig(alpha=alpha))

    def stage2(init: StageResult, alpha: float, hard_negatives: bool = True) -> StageResult:
        cfg = TrainConfig(stage=2, learning_rate=settings.stage2_lr, batch_size=settings.batch_size,
                          epochs=settings.stage2_epochs, seed=seed, sta_enabled=alpha > 0,
                          hard_negatives_enabled=hard_negatives)
        return run_stage2(init.checkpoint, split.triplets, cfg, LossConfig(alpha=alpha))

    rows: dict[str, dict[str, float]] = {}

    def record(name: str, result: StageResult) -> StageResult:
        rows[name] = evaluate(result)
        if log:
            log(f"seed {seed} {name:<14} R@1 {100 * rows[name]['R@1']:6.2f}")
        return result

    default_alpha = LossConfig().alpha
    record("Baseline", stage1(0.0, vsi=False))
    s1_by_alpha = {a: stage1(a, vsi=True) for a in settings.alphas}
    for a, res in s1_by_alpha.items():
        record(f"Stage I {_alpha_row(a)}", res)
    full_s1 = s1_by_alpha[default_alpha]
    rows["+VSI"] = rows[f"Stage I {_alpha_row(0.0)}"]
    rows["+L_sta"] = rows["Stage I-only"] = rows[f"Stage I {_alpha_row(default_alpha)}"]
    record("+CA", stage2(full_s1, default_alpha, hard_negatives=False))
    for a, res in s1_by_alpha.items():
        record(_alpha_row(a), stage2(res, a))
    rows["+HNL"] = rows["Stage I+II"] = rows[_alpha_row(default_alpha)]
    record("Stage II-only", stage2(stage1(default_alpha, vsi=True, epochs=0), default_alpha))
    return rows


def run_benchmark(settings: BenchmarkSettings = BenchmarkSettings(),
                  log: Callable[[str], None] | None = None) -> BenchmarkResult:
    start = time.perf_counter()
    pairs = toydata.generate_pairs(BACKBONE_PAIRS, BACKBONE_DATA_SEED)
    backbone = pretrain_backbone(pairs, settings.model, settings.backbone)
    if log:
        log(f"backbone pretrained in {time.perf_counter() - start:.1f}s")
    per_seed = {s: run_seed(backbone, s, settings, log) for s in settings.seeds}
    return BenchmarkResult(settings, per_seed, time.perf_counter() - start)


def quick_settings() -> BenchmarkSettings:
    """A reduced configuration for smoke runs."""
    return replace(BenchmarkSettings(), seeds=(0,), stage1_epochs=2, stage2_epochs=1,
                   n_pairs=128, n_triplets=128, gallery_size=64, n_queries=64,
                   backbone=replace(BackboneConfig(), epochs=1))
