"""Command-line interface.

Every command validates its flags before touching the filesystem. Failures
print a single JSON line ``{"error": <kind>, "message": <text>}`` to stderr
and exit nonzero: 2 for argument errors, 1 for everything else.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import toydata
from .benchmark import BACKBONE_DATA_SEED, BACKBONE_PAIRS
from .checkpoint import (
    IntegrityError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, format_run_config, load_run_config
from .model import StateError
from .retrieval import (
    MAP_KS,
    RECALL_KS,
    composed_queries,
    evaluate_cir,
    format_table,
    gallery_index,
    metrics_records,
    search,
)
from .training import TrainingError, pretrain_backbone, run_stage1, run_stage2

CHECKPOINT_NAME = "checkpoint.tscir"
METRICS_NAME = "metrics.jsonl"
CONFIG_ECHO_NAME = "config.txt"

# --ablate names -> TrainConfig / Toggles fields
ABLATE_KEYS = {
    "vsi": "vsi_enabled",
    "sta": "sta_enabled",
    "hnl": "hard_negatives_enabled",
    "mapping": "stage2_mapping_enabled",
}
_ON = {"on", "true", "1", "yes"}
_OFF = {"off", "false", "0", "no"}


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- helpers


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return values


def _non_negative(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def parse_ablate(text: str | None) -> dict[str, bool]:
    """`vsi=off,sta=on` -> {"vsi_enabled": False, "sta_enabled": True}."""
    out: dict[str, bool] = {}
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"--ablate expects name=on|off items, got {item!r}")
        name, value = (s.strip().lower() for s in item.split("=", 1))
        if name not in ABLATE_KEYS:
            raise UsageError(f"unknown --ablate name {name!r}; choose from {sorted(ABLATE_KEYS)}")
        if value not in _ON | _OFF:
            raise UsageError(f"--ablate {name} must be on or off")
        out[ABLATE_KEYS[name]] = value in _ON
    return out


def _check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"--out {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise UsageError(f"--out {path} is not empty; pass --force to overwrite")


def _require_file(path: Path, flag: str) -> None:
    if not path.is_file():
        raise UsageError(f"{flag} {path} does not exist")


def _run_config(path: str | None, stage: int | None) -> RunConfig:
    if path is None:
        from .config import TrainConfig

        return RunConfig(train=TrainConfig(stage=stage or 1))
    _require_file(Path(path), "--config")
    return load_run_config(path, stage)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _write_run(out: Path, metrics: str) -> None:
    """Create the run directory only once training has succeeded."""
    out.mkdir(parents=True, exist_ok=True)
    _write(out / METRICS_NAME, metrics)


def _emit_table(rows, columns, as_json: bool, label: str = "Method") -> str:
    return metrics_records(rows) if as_json else format_table(rows, columns, label) + "\n"


# ------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> str:
    out = Path(args.out)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    _check_out_dir(out, args.force)
    seed = args.seed
    files: dict[str, str] = {}
    specs: list[toydata.SceneSpec] = []
    if args.kind == "pairs":
        pairs = toydata.generate_pairs(args.n, seed + 104, partial=args.partial)
        files["pairs.jsonl"] = toydata.pairs_manifest(pairs)
        specs = [s for s, _ in pairs]
    elif args.kind == "triplets":
        gallery = toydata.build_gallery(args.gallery_size, seed + 101)
        queries = toydata.generate_triplets(args.queries, seed + 102, gallery=gallery,
                                            exclude=gallery)
        triplets = toydata.generate_triplets(args.n, seed + 103, exclude=gallery,
                                             noisy_fraction=args.noisy_fraction)
        files["triplets.jsonl"] = toydata.triplets_manifest(triplets)
        files["queries.jsonl"] = toydata.triplets_manifest(queries)
        files["gallery.jsonl"] = toydata.gallery_manifest(gallery)
        specs = [t.reference for t in triplets] + [t.target for t in triplets]
        specs += [toydata.spec_from_id(g) for g in gallery]
    else:
        gallery = toydata.build_gallery(args.gallery_size, seed + 105, multi_target=True)
        queries = toydata.generate_triplets(args.n, seed + 106, multi_target=True,
                                            gallery=gallery, exclude=gallery)
        files["queries.jsonl"] = toydata.triplets_manifest(queries)
        files["gallery.jsonl"] = toydata.gallery_manifest(gallery)
        specs = [t.reference for t in queries] + [toydata.spec_from_id(g) for g in gallery]
    meta = {"kind": args.kind, "n": args.n, "seed": seed, "gallery_size": args.gallery_size,
            "queries": args.queries, "partial": args.partial,
            "noisy_fraction": args.noisy_fraction}
    files["meta.json"] = json.dumps(meta, sort_keys=True) + "\n"

    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        _write(out / name, text)
    if args.rasters:
        ids = sorted({s.image_id for s in specs})
        batch = toydata.render_batch([toydata.spec_from_id(i) for i in ids])
        np.save(out / "rasters.npy", batch.astype("<f4"), allow_pickle=False)
        _write(out / "rasters_ids.json", json.dumps(ids) + "\n")
    return "".join(f"wrote {out / name}\n" for name in sorted(files))


def cmd_pretrain(args) -> str:
    cfg = _run_config(args.config, None)
    out = Path(args.out)
    _check_out_dir(out, args.force)
    if args.data:
        _require_file(Path(args.data) / "pairs.jsonl", "--data")
        pairs = toydata.read_pairs(Path(args.data) / "pairs.jsonl")
    else:
        pairs = toydata.generate_pairs(BACKBONE_PAIRS, BACKBONE_DATA_SEED)
    log = io.StringIO()
    result = pretrain_backbone(pairs, cfg.model, cfg.backbone, log)
    _write_run(out, log.getvalue())
    save_checkpoint(result.checkpoint, out / CHECKPOINT_NAME)
    _write(out / CONFIG_ECHO_NAME, format_run_config(cfg))
    means = result.epoch_means()
    last = f"{means[-1]:.6f}" if means else "n/a"
    return f"backbone: {len(means)} epochs, final loss {last}\nwrote {out / CHECKPOINT_NAME}\n"


def cmd_train_stage1(args) -> str:
    if bool(args.backbone) == bool(args.resume):
        raise UsageError("give exactly one of --backbone or --resume")
    cfg = _run_config(args.config, 1)
    train = replace(cfg.train, **parse_ablate(args.ablate))
    data = Path(args.data) / "pairs.jsonl"
    _require_file(data, "--data")
    init_path = Path(args.backbone or args.resume)
    _require_file(init_path, "--backbone" if args.backbone else "--resume")
    out = Path(args.out)
    _check_out_dir(out, args.force)

    init = load_checkpoint(init_path)
    expected = "backbone" if args.backbone else "stage1"
    if init.stage != expected:
        raise StateError(f"{init_path} is tagged {init.stage!r}, expected {expected!r}")
    pairs = toydata.read_pairs(data)
    log = io.StringIO()
    result = run_stage1(init, pairs, train, cfg.loss, log)
    _write_run(out, log.getvalue())
    save_checkpoint(result.checkpoint, out / CHECKPOINT_NAME)
    _write(out / CONFIG_ECHO_NAME, format_run_config(replace(cfg, train=train)))
    means = result.epoch_means()
    last = f"{means[-1]:.6f}" if means else "n/a"
    return f"stage1: {len(means)} epochs, final loss {last}\nwrote {out / CHECKPOINT_NAME}\n"


def cmd_train_stage2(args) -> str:
    cfg = _run_config(args.config, 2)
    train = replace(cfg.train, **parse_ablate(args.ablate))
    data = Path(args.data) / "triplets.jsonl"
    _require_file(data, "--data")
    ckpt_path = Path(args.stage1_checkpoint)
    _require_file(ckpt_path, "--stage1-checkpoint")
    out = Path(args.out)
    _check_out_dir(out, args.force)

    stage1 = load_checkpoint(ckpt_path)
    triplets = toydata.read_triplets(data)
    log = io.StringIO()
    result = run_stage2(stage1, triplets, train, cfg.loss, log)
    _write_run(out, log.getvalue())
    save_checkpoint(result.checkpoint, out / CHECKPOINT_NAME)
    _write(out / CONFIG_ECHO_NAME, format_run_config(replace(cfg, train=train)))
    means = result.epoch_means()
    last = f"{means[-1]:.6f}" if means else "n/a"
    return f"stage2: {len(means)} epochs, final loss {last}\nwrote {out / CHECKPOINT_NAME}\n"


def cmd_eval(args) -> str:
    ckpt_path = Path(args.checkpoint)
    _require_file(ckpt_path, "--checkpoint")
    split = Path(args.split)
    for name in ("queries.jsonl", "gallery.jsonl"):
        _require_file(split / name, "--split")
    model = model_from_checkpoint(load_checkpoint(ckpt_path), expect=("stage1", "stage2"))
    queries = toydata.read_triplets(split / "queries.jsonl")
    gallery = toydata.read_gallery(split / "gallery.jsonl")
    if not gallery:
        raise UsageError("--split has an empty gallery")
    multi = any(len(q.target_ids) > 1 for q in queries)
    map_ks = args.map_k if args.map_k is not None else (MAP_KS if multi else ())
    metrics = evaluate_cir(model, queries, gallery, args.k, map_ks)
    columns = [f"R@{k}" for k in args.k] + [f"mAP@{k}" for k in map_ks]
    rows = [(model.stage, metrics)]
    if args.out:
        _write(Path(args.out), metrics_records(rows))
    return _emit_table(rows, columns, args.json, label="Checkpoint")


def cmd_retrieve(args) -> str:
    ckpt_path = Path(args.checkpoint)
    _require_file(ckpt_path, "--checkpoint")
    try:
        reference = toydata.spec_from_id(args.reference)
    except (KeyError, ValueError):
        raise UsageError(f"unknown reference id {args.reference!r}") from None
    if not args.modification.strip():
        raise UsageError("--modification must not be empty")
    if args.split:
        _require_file(Path(args.split) / "gallery.jsonl", "--split")
        gallery = toydata.read_gallery(Path(args.split) / "gallery.jsonl")
    else:
        gallery = [s.image_id for s in toydata.ALL_SPECS]
    if args.k > len(gallery):
        raise UsageError(f"--k {args.k} exceeds the gallery size {len(gallery)}")
    model = model_from_checkpoint(load_checkpoint(ckpt_path), expect=("stage1", "stage2"))
    query = toydata.TripletRecord(0, reference, args.modification, reference,
                                  toydata.caption(reference), (reference.image_id,))
    z = composed_queries(model, [query])[0]
    result = search(gallery_index(model, gallery), z, args.k, "query")
    rows = [(rank, gid, score) for rank, (gid, score)
            in enumerate(zip(result.ranked_ids, result.scores), start=1)]
    if args.json:
        return "".join(json.dumps({"rank": r, "id": g, "score": round(s, 6),
                                   "caption": toydata.caption(toydata.spec_from_id(g))},
                                  sort_keys=True) + "\n" for r, g, s in rows)
    lines = [f"reference {reference.image_id}: {toydata.caption(reference)}",
             f"modification: {args.modification}",
             f"{'rank':>4}  {'id':<8}  {'score':>8}  caption"]
    for r, g, s in rows:
        lines.append(f"{r:>4}  {g:<8}  {s:8.4f}  {toydata.caption(toydata.spec_from_id(g))}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> str:
    path = Path(args.checkpoint)
    _require_file(path, "--checkpoint")
    ckpt = load_checkpoint(path)
    params = ckpt.params
    groups: dict[str, int] = {}
    trainable: dict[str, int] = {}
    for name, arr in params.arrays.items():
        g = name.split(".", 1)[0]
        groups[g] = groups.get(g, 0) + arr.size
        if params.trainable[name]:
            trainable[g] = trainable.get(g, 0) + arr.size
    if args.json:
        return json.dumps({"stage": ckpt.stage, "format_version": ckpt.format_version,
                           "config": ckpt.config.to_dict(), "toggles": ckpt.toggles.to_dict(),
                           "groups": groups, "trainable": trainable,
                           "total": params.count()}, sort_keys=True) + "\n"
    lines = [f"stage: {ckpt.stage}", f"format version: {ckpt.format_version}", "config:"]
    for key, value in ckpt.config.to_dict().items():
        lines.append(f"  {key} = {value}")
    lines.append("toggles:")
    for key, value in ckpt.toggles.to_dict().items():
        lines.append(f"  {key} = {value}")
    lines.append("parameters:")
    width = max(len(g) for g in groups)
    for g in sorted(groups):
        mark = "  (trained in this stage)" if g in trainable else ""
        lines.append(f"  {g:<{width}}  {groups[g]:>9,}{mark}")
    lines.append(f"  {'total':<{width}}  {params.count():>9,}")
    return "\n".join(lines) + "\n"


def cmd_benchmark(args) -> str:
    from .benchmark import BenchmarkSettings, quick_settings, run_benchmark

    settings = quick_settings() if args.quick else BenchmarkSettings()
    if args.seeds:
        settings = replace(settings, seeds=args.seeds)
    log = (lambda msg: print(msg, file=sys.stderr, flush=True)) if args.verbose else None
    result = run_benchmark(settings, log)
    if args.out:
        records = [{"seed": s, "name": name, **vals}
                   for s, rows in result.per_seed.items() for name, vals in rows.items()]
        _write(Path(args.out), "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return result.tables() + "\n"


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tscir", description="Two-stage zero-shot composed image retrieval "
                     "on a procedural toy world.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write toy manifests")
    p.add_argument("--kind", required=True, choices=("pairs", "triplets", "multi-target"))
    p.add_argument("--n", required=True, type=_non_negative)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--gallery-size", type=_non_negative, default=256)
    p.add_argument("--queries", type=_non_negative, default=512,
                   help="held-out CIR queries written with --kind triplets")
    p.add_argument("--partial", action="store_true", help="captions with dropped attributes")
    p.add_argument("--noisy-fraction", type=float, default=0.0)
    p.add_argument("--rasters", action="store_true", help="also write rendered images (.npy)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastively pretrain the dual encoder")
    p.add_argument("--config")
    p.add_argument("--data", help="directory with pairs.jsonl (default: 2048 fresh pairs)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-stage1", help="train mapping, patch projection and VSI")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="directory with pairs.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", help="pretrained backbone checkpoint")
    p.add_argument("--resume", help="continue from a stage1 checkpoint")
    p.add_argument("--ablate", help="e.g. vsi=off,sta=off")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the composing adapters")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="directory with triplets.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-checkpoint", required=True)
    p.add_argument("--ablate", help="e.g. hnl=off,mapping=off")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="Recall@K / mAP@K on a query split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="directory with queries.jsonl and gallery.jsonl")
    p.add_argument("--k", type=_int_list, default=RECALL_KS)
    p.add_argument("--map-k", type=_int_list, default=None)
    p.add_argument("--json", action="store_true", help="print JSON lines instead of a table")
    p.add_argument("--out", help="also write JSON lines here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank the gallery for one composed query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True, help="reference image id, e.g. img0042")
    p.add_argument("--modification", required=True)
    p.add_argument("--k", type=_non_negative, default=10)
    p.add_argument("--split", help="gallery directory (default: the whole scene space)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("benchmark", help="run the toy ablation tables")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seeds", type=lambda s: tuple(int(x) for x in s.split(",")))
    p.add_argument("--out", help="per-seed JSON lines")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_benchmark)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "k", 1) == 0:
            raise UsageError("--k must be >= 1")
        output = args.func(args)
    except UsageError as exc:
        return _fail("ArgumentError", exc, 2)
    except (ConfigError, StateError, IntegrityError, TrainingError, ValueError,
            KeyError, OSError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    sys.stdout.write(output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
