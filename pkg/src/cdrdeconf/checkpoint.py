"""Checkpoints: a JSON manifest plus one little-endian float32 blob per block."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    phase: str
    config_hash: str
    blocks: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def _blob_name(name: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9_.\-]+", name):
        raise CheckpointError(f"block name {name!r} is not filesystem safe")
    return f"{name}.f32"


def _digest(shape, data: bytes) -> str:
    # the shape is hashed too, so a reshaped manifest entry is caught
    return hashlib.sha256(json.dumps(list(shape)).encode() + data).hexdigest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    """Write ``ckpt`` into directory ``path`` (created if missing)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(ckpt.blocks):
        arr = np.asarray(ckpt.blocks[name])
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"block {name!r} has non-finite entries")
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")
        fname = _blob_name(name)
        (root / fname).write_bytes(data)
        entries.append(
            {"name": name, "file": fname, "shape": list(arr.shape), "sha256": _digest(arr.shape, data)}
        )
    manifest = {
        "version": FORMAT_VERSION,
        "phase": ckpt.phase,
        "config_hash": ckpt.config_hash,
        "dtype": "float32-le",
        "blocks": entries,
        "meta": ckpt.meta,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_checkpoint(path: str | Path, expect_phase: str | None = None, expect_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint directory; blocks come back as float64 arrays."""
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"manifest {mpath} is not valid JSON: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    if expect_phase is not None and manifest["phase"] != expect_phase:
        raise CheckpointError(f"expected a {expect_phase!r} checkpoint, found {manifest['phase']!r}")
    if expect_hash is not None and manifest["config_hash"] != expect_hash:
        raise CheckpointError(
            f"checkpoint at {root} was written with config {manifest['config_hash']}, current config is {expect_hash}"
        )
    blocks = {}
    for entry in manifest["blocks"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        blob = root / entry["file"]
        if not blob.exists():
            raise IntegrityError(f"block {name!r}: blob {blob.name} is missing")
        data = blob.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if len(data) != expected:
            raise IntegrityError(f"block {name!r}: blob has {len(data)} bytes, manifest shape {shape} needs {expected}")
        if _digest(shape, data) != entry["sha256"]:
            raise IntegrityError(f"block {name!r}: checksum mismatch")
        blocks[name] = np.frombuffer(data, dtype=_DTYPE).reshape(shape).astype(np.float64)
    return Checkpoint(manifest["phase"], manifest["config_hash"], blocks, manifest.get("meta", {}))


def round_to_stored(arrays: dict[str, np.ndarray]) -> None:
    """Round arrays in place to the stored precision, so that a run continuing
    in memory and a run resumed from disk see identical values."""
    for a in arrays.values():
        a[...] = a.astype(_DTYPE).astype(np.float64)
