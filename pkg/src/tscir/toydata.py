"""Procedural shapes: scenes, rendering, captions, edit grammar and manifests.

Every image is a pure function of its :class:`SceneSpec`, and image ids are
the index of the spec in the fixed enumeration order, so ``img0000`` always
denotes the same picture.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (220, 30, 30),
    "green": (30, 160, 60),
    "blue": (30, 60, 220),
    "yellow": (240, 220, 30),
    "purple": (140, 50, 180),
    "orange": (250, 140, 20),
    "cyan": (30, 200, 220),
    "pink": (250, 120, 180),
}
SIZES = ("small", "medium", "large")
POSITIONS = ("center", "left", "right", "top", "bottom")
BACKGROUNDS = {"white": (255, 255, 255), "gray": (128, 128, 128), "black": (0, 0, 0)}

# Fractions of the image side.
_RADIUS = {"small": 0.125, "medium": 0.1875, "large": 0.25}
_CENTER = {
    "center": (0.5, 0.5),
    "left": (0.28, 0.5),
    "right": (0.72, 0.5),
    "top": (0.5, 0.28),
    "bottom": (0.5, 0.72),
}

ATTRIBUTES = ("shape", "color", "size", "position", "background")
EDITABLE = ("color", "shape", "size", "position")  # canonical edit order

CAPTION_WORDS = ("a", "at", "the", "on", "background", "object")
EDIT_WORDS = ("change", "color", "to", "shape", "make", "it", "larger", "smaller",
              "move", "the", "and")
TEMPLATE_WORDS = ("a", "photo", "of", "that")


@dataclass(frozen=True, order=True)
class SceneSpec:
    shape: str
    color: str
    size: str
    position: str
    background: str

    def __post_init__(self):
        for name, allowed in (("shape", SHAPES), ("color", COLORS), ("size", SIZES),
                              ("position", POSITIONS), ("background", BACKGROUNDS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"unknown {name} {getattr(self, name)!r}")

    @property
    def index(self) -> int:
        return _SPEC_INDEX[self]

    @property
    def image_id(self) -> str:
        return f"img{self.index:04d}"

    def key(self, ignore_background: bool = False) -> tuple:
        t = (self.shape, self.color, self.size, self.position)
        return t if ignore_background else t + (self.background,)


ALL_SPECS: tuple[SceneSpec, ...] = tuple(
    SceneSpec(*combo)
    for combo in itertools.product(SHAPES, COLORS, SIZES, POSITIONS, BACKGROUNDS)
)
_SPEC_INDEX = {spec: i for i, spec in enumerate(ALL_SPECS)}


def spec_from_id(image_id: str) -> SceneSpec:
    if not image_id.startswith("img"):
        raise KeyError(image_id)
    idx = int(image_id[3:])
    if not 0 <= idx < len(ALL_SPECS):
        raise KeyError(image_id)
    return ALL_SPECS[idx]


# --------------------------------------------------------------------------- render


def render(spec: SceneSpec, size_px: int = 32) -> np.ndarray:
    """Rasterize `spec` to an (H, W, 3) float32 array in [0, 1].

    Pixels are filled when their center lies inside the shape; no antialiasing.
    """
    return _render_cached(spec, size_px).copy()


@lru_cache(maxsize=4096)
def _render_cached(spec: SceneSpec, size_px: int) -> np.ndarray:
    y, x = np.mgrid[0:size_px, 0:size_px].astype(np.float64) + 0.5
    fx, fy = _CENTER[spec.position]
    cx, cy, r = fx * size_px, fy * size_px, _RADIUS[spec.size] * size_px
    dx, dy = x - cx, y - cy
    if spec.shape == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif spec.shape == "square":
        half = 0.85 * r
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif spec.shape == "triangle":
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.5)
    else:  # cross
        arm = r / 3.0
        mask = ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | (
            (np.abs(dy) <= r) & (np.abs(dx) <= arm)
        )
    img = np.empty((size_px, size_px, 3), dtype=np.uint8)
    img[...] = BACKGROUNDS[spec.background]
    img[mask] = COLORS[spec.color]
    out = img.astype(np.float32) / np.float32(255.0)
    out.flags.writeable = False
    return out


def render_batch(specs: Sequence[SceneSpec], size_px: int = 32) -> np.ndarray:
    return np.stack([_render_cached(s, size_px) for s in specs])


# -------------------------------------------------------------------------- captions


def caption(spec: SceneSpec, drop: Iterable[str] = ()) -> str:
    """Describe `spec`; attributes named in `drop` are omitted."""
    drop = set(drop)
    words = ["a"]
    if "size" not in drop:
        words.append(spec.size)
    if "color" not in drop:
        words.append(spec.color)
    words.append(spec.shape if "shape" not in drop else "object")
    if "position" not in drop:
        words += ["at", "the", spec.position]
    if "background" not in drop:
        words += ["on", "a", spec.background, "background"]
    return " ".join(words)


def parse_caption(text: str) -> dict[str, str]:
    """Inverse of :func:`caption`: returns the attributes the caption mentions."""
    words = text.split()
    out: dict[str, str] = {}
    if not words or words[0] != "a":
        raise ValueError(f"not a caption: {text!r}")
    i = 1
    if i < len(words) and words[i] in SIZES:
        out["size"] = words[i]
        i += 1
    if i < len(words) and words[i] in COLORS:
        out["color"] = words[i]
        i += 1
    if i >= len(words):
        raise ValueError(f"not a caption: {text!r}")
    if words[i] in SHAPES:
        out["shape"] = words[i]
    elif words[i] != "object":
        raise ValueError(f"not a caption: {text!r}")
    i += 1
    if words[i:i + 2] == ["at", "the"] and i + 2 < len(words) and words[i + 2] in POSITIONS:
        out["position"] = words[i + 2]
        i += 3
    if (words[i:i + 2] == ["on", "a"] and i + 3 < len(words)
            and words[i + 2] in BACKGROUNDS and words[i + 3] == "background"):
        out["background"] = words[i + 2]
        i += 4
    if i != len(words):
        raise ValueError(f"trailing words in caption: {text!r}")
    return out


def generate_pairs(n: int, seed: int, partial: bool = False) -> list[tuple[SceneSpec, str]]:
    """`n` (spec, caption) pairs with specs uniform over the scene space.

    With `partial`, each attribute is independently dropped from the caption
    with probability 0.5.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(ALL_SPECS), size=n)
    pairs = []
    for i in idx:
        spec = ALL_SPECS[int(i)]
        drop = ()
        if partial:
            drop = [a for a in ATTRIBUTES if rng.random() < 0.5]
        pairs.append((spec, caption(spec, drop)))
    return pairs


# ---------------------------------------------------------------------- edit grammar


def _edit_phrase(attr: str, value) -> str:
    if attr == "color":
        return f"change color to {value}"
    if attr == "shape":
        return f"change shape to {value}"
    if attr == "size":
        return "make it larger" if value > 0 else "make it smaller"
    return f"move to the {value}"


def modification_text(delta: dict) -> str:
    return " and ".join(_edit_phrase(a, delta[a]) for a in EDITABLE if a in delta)


def parse_modification(text: str) -> dict:
    """Parse an edit string into an attribute delta.

    Size deltas are +1 / -1 steps; other attributes map to their new value.
    """
    delta: dict = {}
    for clause in text.split(" and "):
        w = clause.split()
        if len(w) == 4 and w[:3] == ["change", "color", "to"] and w[3] in COLORS:
            attr, val = "color", w[3]
        elif len(w) == 4 and w[:3] == ["change", "shape", "to"] and w[3] in SHAPES:
            attr, val = "shape", w[3]
        elif w == ["make", "it", "larger"]:
            attr, val = "size", 1
        elif w == ["make", "it", "smaller"]:
            attr, val = "size", -1
        elif len(w) == 4 and w[:3] == ["move", "to", "the"] and w[3] in POSITIONS:
            attr, val = "position", w[3]
        else:
            raise ValueError(f"unparseable modification clause {clause!r}")
        if attr in delta:
            raise ValueError(f"attribute {attr} edited twice in {text!r}")
        delta[attr] = val
    return delta


def apply_delta(spec: SceneSpec, delta: dict) -> SceneSpec:
    changes = {}
    for attr, val in delta.items():
        if attr == "size":
            j = SIZES.index(spec.size) + val
            if not 0 <= j < len(SIZES):
                raise ValueError(f"cannot resize {spec.size} by {val}")
            changes["size"] = SIZES[j]
        else:
            changes[attr] = val
    return replace(spec, **changes)


def _single_edits(spec: SceneSpec) -> dict[str, list]:
    j = SIZES.index(spec.size)
    return {
        "color": [c for c in COLORS if c != spec.color],
        "shape": [s for s in SHAPES if s != spec.shape],
        "size": [v for v in (1, -1) if 0 <= j + v < len(SIZES)],
        "position": [p for p in POSITIONS if p != spec.position],
    }


def enumerate_edits(spec: SceneSpec) -> list[dict]:
    """All 1- and 2-attribute deltas applicable to `spec`, in a fixed order."""
    options = _single_edits(spec)
    edits = [{a: v} for a in EDITABLE for v in options[a]]
    for a, b in itertools.combinations(EDITABLE, 2):
        edits += [{a: va, b: vb} for va in options[a] for vb in options[b]]
    return edits


# -------------------------------------------------------------------------- triplets


@dataclass(frozen=True)
class TripletRecord:
    id: int
    reference: SceneSpec
    modification: str
    target: SceneSpec
    reference_caption: str
    target_ids: tuple[str, ...]
    noisy: bool = False

    @property
    def reference_id(self) -> str:
        return self.reference.image_id


def build_gallery(size: int, seed: int, multi_target: bool = False) -> list[str]:
    """Sample gallery image ids.

    In multi-target mode each sampled attribute key (background ignored)
    contributes all of its background variants, so every target has several
    positives.
    """
    rng = np.random.default_rng(seed)
    if not multi_target:
        if size > len(ALL_SPECS):
            raise ValueError("gallery larger than the scene space")
        idx = np.sort(rng.choice(len(ALL_SPECS), size=size, replace=False))
        return [ALL_SPECS[int(i)].image_id for i in idx]
    keys = sorted({s.key(ignore_background=True) for s in ALL_SPECS})
    order = rng.permutation(len(keys))
    ids: list[str] = []
    for k in order:
        variants = [s.image_id for s in ALL_SPECS if s.key(True) == keys[int(k)]]
        if len(ids) + len(variants) > size:
            break
        ids += variants
    if not ids:
        raise ValueError("gallery too small for multi-target mode")
    return sorted(ids)


def generate_triplets(
    n: int,
    seed: int,
    multi_target: bool = False,
    gallery: Sequence[str] | None = None,
    exclude: Iterable[str] = (),
    noisy_fraction: float = 0.0,
) -> list[TripletRecord]:
    """Sample `n` distinct (reference, modification) triplets.

    When `gallery` is given, targets are restricted to gallery content and
    `target_ids` lists every gallery image matching the target (background
    ignored in multi-target mode). References never come from `exclude`.
    Edits touch one or two attributes with equal probability.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    excluded = set(exclude)
    gallery_by_key: dict[tuple, list[str]] | None = None
    if gallery is not None:
        gallery_by_key = {}
        for gid in gallery:
            gallery_by_key.setdefault(spec_from_id(gid).key(multi_target), []).append(gid)
    elif multi_target:
        raise ValueError("multi-target triplets need a gallery")

    by_arity: dict[int, list[tuple[SceneSpec, dict]]] = {1: [], 2: []}
    for ref in ALL_SPECS:
        if ref.image_id in excluded:
            continue
        for delta in enumerate_edits(ref):
            if gallery_by_key is not None:
                if apply_delta(ref, delta).key(multi_target) not in gallery_by_key:
                    continue
            by_arity[len(delta)].append((ref, delta))
    capacity = len(by_arity[1]) + len(by_arity[2])
    if n > capacity:
        raise ValueError(f"n={n} exceeds the {capacity} distinct triplets available")

    n1 = int(rng.binomial(n, 0.5))
    n1 = min(max(n1, n - len(by_arity[2])), len(by_arity[1]))
    picks = [by_arity[1][int(i)] for i in rng.choice(len(by_arity[1]), n1, replace=False)]
    picks += [by_arity[2][int(i)] for i in rng.choice(len(by_arity[2]), n - n1, replace=False)]
    picks = [picks[int(i)] for i in rng.permutation(len(picks))]

    records = []
    for i, (ref, delta) in enumerate(picks):
        target = apply_delta(ref, delta)
        text = modification_text(delta)
        noisy = bool(noisy_fraction > 0 and rng.random() < noisy_fraction)
        if noisy:
            others = [e for e in enumerate_edits(ref) if e != delta]
            text = modification_text(others[int(rng.integers(len(others)))])
        if gallery_by_key is not None:
            targets = tuple(sorted(gallery_by_key[target.key(multi_target)]))
        else:
            targets = (target.image_id,)
        records.append(TripletRecord(i, ref, text, target, caption(ref), targets, noisy))
    return records


# ------------------------------------------------------------------------- manifests


def _dump(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def pairs_manifest(pairs: Sequence[tuple[SceneSpec, str]]) -> str:
    return _dump(
        {"id": i, "image_id": s.image_id, "spec": asdict(s), "caption": c}
        for i, (s, c) in enumerate(pairs)
    )


def triplets_manifest(records: Sequence[TripletRecord]) -> str:
    return _dump(
        {
            "id": r.id,
            "reference_id": r.reference_id,
            "reference": asdict(r.reference),
            "modification": r.modification,
            "target": asdict(r.target),
            "reference_caption": r.reference_caption,
            "target_ids": list(r.target_ids),
            "noisy": r.noisy,
        }
        for r in records
    )


def gallery_manifest(ids: Sequence[str]) -> str:
    return _dump({"id": gid, "spec": asdict(spec_from_id(gid))} for gid in ids)


def _lines(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_pairs(path: str | Path) -> list[tuple[SceneSpec, str]]:
    return [(SceneSpec(**r["spec"]), r["caption"]) for r in _lines(path)]


def read_triplets(path: str | Path) -> list[TripletRecord]:
    return [
        TripletRecord(
            id=r["id"],
            reference=SceneSpec(**r["reference"]),
            modification=r["modification"],
            target=SceneSpec(**r["target"]),
            reference_caption=r["reference_caption"],
            target_ids=tuple(r["target_ids"]),
            noisy=r.get("noisy", False),
        )
        for r in _lines(path)
    ]


def read_gallery(path: str | Path) -> list[str]:
    return [r["id"] for r in _lines(path)]


@dataclass
class ToySplit:
    """Stage-I pairs, Stage-II triplets and a held-out CIR evaluation split."""

    pairs: list[tuple[SceneSpec, str]]
    triplets: list[TripletRecord]
    gallery: list[str]
    queries: list[TripletRecord]
    multi_gallery: list[str] = field(default_factory=list)
    multi_queries: list[TripletRecord] = field(default_factory=list)


def make_split(
    seed: int,
    n_pairs: int = 512,
    n_triplets: int = 1024,
    gallery_size: int = 256,
    n_queries: int = 512,
    n_multi_queries: int = 0,
    partial_captions: bool = False,
    noisy_fraction: float = 0.0,
) -> ToySplit:
    gallery = build_gallery(gallery_size, seed + 101)
    queries = generate_triplets(n_queries, seed + 102, gallery=gallery, exclude=gallery)
    triplets = generate_triplets(n_triplets, seed + 103, exclude=gallery,
                                 noisy_fraction=noisy_fraction)
    pairs = generate_pairs(n_pairs, seed + 104, partial=partial_captions)
    split = ToySplit(pairs, triplets, gallery, queries)
    if n_multi_queries:
        mg = build_gallery(gallery_size, seed + 105, multi_target=True)
        split.multi_gallery = mg
        split.multi_queries = generate_triplets(
            n_multi_queries, seed + 106, multi_target=True, gallery=mg, exclude=mg
        )
    return split
