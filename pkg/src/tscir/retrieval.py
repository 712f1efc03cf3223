"""Exact cosine retrieval, Recall@K / mAP@K and the CIR evaluation driver."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from . import toydata
from .composing import encode_composed
from .encoders import encode_image

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class QueryResult:
    query_id: object
    ranked_ids: tuple
    scores: tuple


class RetrievalIndex:
    """Immutable id-keyed gallery of unit-norm embeddings."""

    def __init__(self, ids: Sequence, embeddings):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(ids):
            raise ValueError("embeddings must be a (G, d) matrix aligned with ids")
        if len(set(ids)) != len(ids):
            raise ValueError("gallery ids must be unique")
        if emb.size and np.abs(np.linalg.norm(emb, axis=1) - 1).max() > UNIT_TOL:
            raise ValueError("gallery rows must be unit-normalized")
        self.ids = list(ids)
        self.embeddings = emb
        self.embeddings.flags.writeable = False
        # rank of each id in ascending id order, used as the tie-break key
        self._id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=object), kind="stable"),
                                   kind="stable")

    def __len__(self) -> int:
        return len(self.ids)

    def search(self, query, K: int, query_id=None) -> QueryResult:
        return search(self, query, K, query_id)


def search(index: RetrievalIndex, query, K: int, query_id=None) -> QueryResult:
    """Exact top-K by inner product; equal scores are ordered by ascending id."""
    if K > len(index):
        raise ValueError(f"K={K} exceeds gallery size {len(index)}")
    q = np.asarray(query, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1) > UNIT_TOL:
        raise ValueError("query must be unit-normalized")
    scores = index.embeddings @ q
    order = np.lexsort((index._id_rank, -scores))[:K]
    return QueryResult(query_id, tuple(index.ids[i] for i in order), tuple(scores[order].tolist()))


def _targets(ground_truth: Mapping, query_id) -> set:
    if query_id not in ground_truth:
        raise ValueError(f"query {query_id!r} missing from ground truth")
    gt = ground_truth[query_id]
    if isinstance(gt, (set, frozenset, list, tuple)):
        return set(gt)
    return {gt}


def recall_at_k(results: Sequence[QueryResult], ground_truth: Mapping, K: int) -> float:
    """Fraction of queries with at least one target in the top K."""
    if not results:
        return 0.0
    hits = 0
    for r in results:
        targets = _targets(ground_truth, r.query_id)
        hits += any(i in targets for i in r.ranked_ids[:K])
    return hits / len(results)


def average_precision_at_k(ranked_ids: Sequence, targets: set, K: int) -> float:
    if not targets:
        raise ValueError("empty ground-truth set")
    hits, total = 0, 0.0
    for rank, item in enumerate(ranked_ids[:K], start=1):
        if item in targets:
            hits += 1
            total += hits / rank
    return total / min(len(targets), K)


def map_at_k(results: Sequence[QueryResult], ground_truth: Mapping, K: int) -> float:
    """Mean AP@K with the min(|targets|, K) normalizer."""
    if not results:
        return 0.0
    return float(np.mean([
        average_precision_at_k(r.ranked_ids, _targets(ground_truth, r.query_id), K)
        for r in results
    ]))


# ------------------------------------------------------------------------ evaluation

RECALL_KS = (1, 5, 10, 50)
MAP_KS = (5, 10, 25, 50)


@torch.no_grad()
def gallery_index(model, gallery_ids: Sequence[str], batch_size: int = 256) -> RetrievalIndex:
    size = model.cfg.image_size
    rows = []
    for start in range(0, len(gallery_ids), batch_size):
        chunk = gallery_ids[start:start + batch_size]
        images = toydata.render_batch([toydata.spec_from_id(g) for g in chunk], size)
        rows.append(encode_image(model.image, images).v_g.double())
    emb = torch.nn.functional.normalize(torch.cat(rows), dim=-1)
    return RetrievalIndex(list(gallery_ids), emb.numpy())


@torch.no_grad()
def composed_queries(model, queries: Sequence[toydata.TripletRecord], batch_size: int = 256) -> np.ndarray:
    size = model.cfg.image_size
    out = []
    for start in range(0, len(queries), batch_size):
        chunk = queries[start:start + batch_size]
        images = toydata.render_batch([q.reference for q in chunk], size)
        z = encode_composed(model, images, [q.modification for q in chunk])
        out.append(torch.nn.functional.normalize(z.double(), dim=-1))
    return torch.cat(out).numpy() if out else np.zeros((0, model.cfg.embed_dim))


def evaluate_cir(
    model,
    queries: Sequence[toydata.TripletRecord],
    gallery_ids: Sequence[str],
    recall_ks: Sequence[int] = RECALL_KS,
    map_ks: Sequence[int] = (),
) -> dict[str, float]:
    """Recall@K (and mAP@K when `map_ks` is given) of composed queries over a gallery.

    Cutoffs larger than the gallery are clipped to its size.
    """
    model.eval()
    index = gallery_index(model, gallery_ids)
    Z = composed_queries(model, queries)
    k_max = min(len(index), max([*recall_ks, *map_ks]))
    results = [search(index, z, k_max, q.id) for z, q in zip(Z, queries)]
    truth = {q.id: set(q.target_ids) for q in queries}
    metrics = {f"R@{k}": recall_at_k(results, truth, min(k, k_max)) for k in recall_ks}
    metrics.update({f"mAP@{k}": map_at_k(results, truth, min(k, k_max)) for k in map_ks})
    return metrics


def format_table(rows: Sequence[tuple[str, Mapping[str, float]]], columns: Sequence[str],
                 label: str = "Method") -> str:
    """Aligned plain-text table with percentages to two decimals."""
    width = max([len(label)] + [len(name) for name, _ in rows])
    head = f"{label:<{width}}  " + "  ".join(f"{c:>7}" for c in columns)
    lines = [head, "-" * len(head)]
    for name, vals in rows:
        cells = "  ".join(
            f"{100 * vals[c]:7.2f}" if c in vals else f"{'-':>7}" for c in columns
        )
        lines.append(f"{name:<{width}}  {cells}")
    return "\n".join(lines)


def metrics_records(rows: Sequence[tuple[str, Mapping[str, float]]]) -> str:
    return "".join(json.dumps({"name": n, **dict(v)}, sort_keys=True) + "\n" for n, v in rows)
