"""Versioned single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"TSCIRCKP"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header (config echo, stage tag, toggles, RNG state,
              tensor table with shapes, offsets and CRC32s)
    u32       CRC32 of the header bytes
    ...       tensor payloads, float32 little-endian, in table order
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import STAGES, ParameterSet, StateError, Toggles, TSCIRModel

MAGIC = b"TSCIRCKP"
FORMAT_VERSION = 1
_PREFIX = len(MAGIC) + 8


class IntegrityError(ValueError):
    """The checkpoint bytes are corrupt; `offset` locates the damaged region."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: str
    params: ParameterSet
    toggles: Toggles = field(default_factory=Toggles)
    rng_state: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.params.arrays):
        raw = np.ascontiguousarray(ckpt.params.arrays[name], dtype="<f4").tobytes()
        table.append(
            {
                "name": name,
                "shape": list(ckpt.params.arrays[name].shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
                "trainable": bool(ckpt.params.trainable[name]),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "config": ckpt.config.to_dict(),
        "toggles": ckpt.toggles.to_dict(),
        "rng_state": ckpt.rng_state,
        "tensors": table,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<II", ckpt.format_version, len(hbytes)),
            hbytes,
            struct.pack("<I", zlib.crc32(hbytes)),
            *chunks,
        ]
    )


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX or data[: len(MAGIC)] != MAGIC:
        raise IntegrityError("bad magic; not a checkpoint", 0)
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {version}", len(MAGIC))
    hend = _PREFIX + hlen
    # a damaged length field only shows up as a header failure, so report from the field
    length_field = len(MAGIC) + 4
    if len(data) < hend + 4:
        raise IntegrityError(f"header of {hlen} bytes runs past the end of the data "
                             f"({len(data)} bytes)", length_field)
    hbytes = data[_PREFIX:hend]
    (hcrc,) = struct.unpack_from("<I", data, hend)
    if zlib.crc32(hbytes) != hcrc:
        raise IntegrityError("header checksum mismatch", length_field)
    header = json.loads(hbytes.decode("utf-8"))
    base = hend + 4
    if len(data) != base + header["payload_bytes"]:
        raise IntegrityError("payload size mismatch", min(len(data), base + header["payload_bytes"]))
    arrays, trainable = {}, {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if zlib.crc32(raw) != entry["crc32"]:
            raise IntegrityError(f"checksum mismatch in tensor {entry['name']!r}", start)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        arrays[entry["name"]] = arr
        trainable[entry["name"]] = entry["trainable"]
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        stage=header["stage"],
        params=ParameterSet(arrays, trainable),
        toggles=Toggles(**header["toggles"]),
        rng_state=header["rng_state"],
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model: TSCIRModel, stage: str, rng_state: dict | None = None) -> Checkpoint:
    return Checkpoint(
        config=model.cfg,
        stage=stage,
        params=ParameterSet.from_model(model, stage),
        toggles=model.toggles,
        rng_state=rng_state or {},
    )


def model_from_checkpoint(ckpt: Checkpoint, expect: tuple[str, ...] | None = None) -> TSCIRModel:
    if expect is not None and ckpt.stage not in expect:
        raise StateError(f"checkpoint is tagged {ckpt.stage!r}, expected one of {expect}")
    model = TSCIRModel(ckpt.config)
    ckpt.params.load_into(model)
    model.toggles = ckpt.toggles
    model.stage = ckpt.stage
    return model
