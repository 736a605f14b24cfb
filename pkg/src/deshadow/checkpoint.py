"""Checkpoints: a JSON manifest next to a flat little-endian float32 blob.

Layout of a checkpoint directory::

    manifest.json   schema, config, config hash, tensor table, step, metrics
    params.bin      tensors back to back as '<f4', offsets from the table
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from deshadow.model import DocDeshadower, ModelConfig, ParamStore

SCHEMA_VERSION = "deshadow-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(Exception):
    pass


class SchemaVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(params: ParamStore, cfg: ModelConfig, meta: dict | None, path) -> Path:
    """Write ``params`` under directory ``path``; returns the manifest path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    table = []
    chunks = []
    offset = 0
    for name, t in params.entries.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "param_version": params.version,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "num_params": params.num_params(),
        "tensors": table,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "step": int(meta.pop("step", 0)),
        "metrics": meta.pop("metrics", {}),
        "meta": meta,
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path / MANIFEST


def load_checkpoint(path) -> tuple[ParamStore, ModelConfig, dict]:
    """Inverse of :func:`save_checkpoint`; validates schema, hash, length and shapes."""
    path = Path(path)
    if path.is_file():
        path = path.parent
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"unreadable manifest in {path}: {exc}") from exc

    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"checkpoint schema {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION!r}"
        )
    cfg = ModelConfig.from_dict(manifest["config"])
    if cfg.digest() != manifest["config_hash"]:
        raise CorruptCheckpointError("config hash does not match the stored config")
    if len(blob) != manifest["blob_bytes"]:
        raise CorruptCheckpointError(
            f"blob has {len(blob)} bytes, manifest records {manifest['blob_bytes']}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CorruptCheckpointError("blob checksum mismatch")

    entries = {}
    for rec in manifest["tensors"]:
        end = rec["offset"] + rec["nbytes"]
        if end > len(blob):
            raise CorruptCheckpointError(f"tensor {rec['name']} runs past the end of the blob")
        arr = np.frombuffer(blob[rec["offset"] : end], dtype=rec["dtype"]).reshape(rec["shape"])
        entries[rec["name"]] = torch.from_numpy(arr.astype(np.float32))

    expected = DocDeshadower(cfg).state_dict()
    if list(expected) != list(entries):
        missing = sorted(set(expected) - set(entries))
        extra = sorted(set(entries) - set(expected))
        raise ShapeMismatchError(f"parameter names differ from config: missing {missing}, extra {extra}")
    for name, t in expected.items():
        if tuple(t.shape) != tuple(entries[name].shape):
            raise ShapeMismatchError(
                f"{name}: stored shape {tuple(entries[name].shape)}, config implies {tuple(t.shape)}"
            )
    meta = dict(manifest.get("meta", {}))
    meta["step"] = manifest["step"]
    meta["metrics"] = manifest["metrics"]
    return ParamStore(entries, manifest.get("param_version", ParamStore().version)), cfg, meta
