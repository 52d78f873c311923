"""Checkpoints: a JSON manifest plus one flat little-endian binary blob.

The manifest records the format version, run config, seed/step, precision,
a sha256 checksum of the blob, and for every named array its shape and
byte offset; offsets tile the blob exactly. Model parameters, optimizer
moments, the momentum copy, and queue contents are all stored as named
arrays so a resumed run continues bitwise-identically.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint."""


def _dtype_for(precision: int) -> np.dtype:
    return np.dtype("<f8" if precision == 64 else "<f4")


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    config: dict,
    seed: int,
    step: int,
    precision: int,
) -> Path:
    """Write manifest.json and params.bin into the directory at path."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    dtype = _dtype_for(precision)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=dtype)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "precision": precision,
        "seed": seed,
        "step": step,
        "config": config,
        "blob_bytes": len(blob),
        "checksum": hashlib.sha256(blob).hexdigest(),
        "arrays": entries,
    }
    (out / BLOB_NAME).write_bytes(blob)
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    return out


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read and verify a checkpoint; returns (arrays, manifest)."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    blob_path = root / BLOB_NAME
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"no checkpoint at {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r}; "
            f"this build reads version {FORMAT_VERSION}"
        )
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"blob length {len(blob)} != manifest {manifest['blob_bytes']}"
        )
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["checksum"]:
        raise CheckpointError(
            "checksum mismatch: checkpoint blob is corrupt "
            f"(expected {manifest['checksum'][:12]}..., got {digest[:12]}...)"
        )
    dtype = _dtype_for(manifest["precision"])
    itemsize = dtype.itemsize
    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest["arrays"]:
        if entry["offset"] != expected_offset:
            raise CheckpointError(
                f"array {entry['name']!r} offset {entry['offset']} leaves a "
                f"gap (expected {expected_offset})"
            )
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if count * itemsize != entry["nbytes"]:
            raise CheckpointError(
                f"array {entry['name']!r} shape/byte mismatch"
            )
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(
            entry["shape"]
        ).copy()
        expected_offset += entry["nbytes"]
    if expected_offset != len(blob):
        raise CheckpointError(
            f"manifest covers {expected_offset} bytes of a {len(blob)}-byte blob"
        )
    return arrays, manifest


# -- state gathering / restoring -------------------------------------------


def model_arrays(model) -> dict[str, np.ndarray]:
    return {p.name: p.data for p in model.parameters()}


def training_state_arrays(model, optimizer, state) -> dict[str, np.ndarray]:
    """Everything needed for a bitwise resume."""
    arrays = dict(model_arrays(model))
    arrays.update(optimizer.state_arrays())
    for p in state.encoders.parameters():
        arrays[f"momentum.{p.name}"] = p.data
    for tag, queue in (("video", state.video_queue), ("text", state.text_queue)):
        arrays[f"queue.{tag}.cls"] = queue.cls_array()
        if queue.keep_tokens:
            toks, mask = queue.token_arrays()
            arrays[f"queue.{tag}.tokens"] = toks
            arrays[f"queue.{tag}.mask"] = mask.astype(float)
    return arrays


def restore_model(model, arrays: dict[str, np.ndarray]) -> None:
    for p in model.parameters():
        if p.name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {p.name!r}")
        stored = arrays[p.name]
        if tuple(stored.shape) != p.shape:
            raise CheckpointError(
                f"parameter {p.name!r} shape {tuple(stored.shape)} does not "
                f"match model shape {p.shape}"
            )
        p.data = np.array(stored, dtype=p.data.dtype)


def restore_training_state(model, optimizer, state, arrays) -> None:
    restore_model(model, arrays)
    optimizer.load_state_arrays(arrays)
    for p in state.encoders.parameters():
        key = f"momentum.{p.name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing {key!r}")
        p.data = np.array(arrays[key], dtype=p.data.dtype)
    for tag, queue in (("video", state.video_queue), ("text", state.text_queue)):
        cls_rows = arrays[f"queue.{tag}.cls"]
        queue.cls_rows = [row.copy() for row in cls_rows]
        if queue.keep_tokens:
            toks = arrays[f"queue.{tag}.tokens"]
            mask = arrays[f"queue.{tag}.mask"].astype(bool)
            queue.token_rows = [t.copy() for t in toks]
            queue.token_masks = [m.copy() for m in mask]
