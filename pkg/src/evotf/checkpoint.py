"""Checkpoint persistence: a JSON manifest plus one little-endian float32 blob."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, param_shapes

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointShapeError",
    "CheckpointTruncatedError",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def save_checkpoint(params: dict[str, torch.Tensor], config: ModelConfig, path, extra: dict | None = None) -> Path:
    """Write ``path/manifest.json`` and ``path/params.bin``; returns ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, shape in param_shapes(config).items():
        t = params[name]
        if tuple(t.shape) != shape:
            raise CheckpointShapeError(f"{name}: tensor shape {tuple(t.shape)} != config shape {shape}")
        raw = t.detach().numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "blob_bytes": offset,
        "tensors": tensors,
        "extra": extra or {},
    }
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], ModelConfig, dict]:
    """Returns ``(params, config, extra)``; raises a distinct error per failure mode."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path / MANIFEST}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    config = ModelConfig.from_dict(manifest["config"])
    expected = param_shapes(config)
    listed = {t["name"]: t for t in manifest["tensors"]}
    if set(listed) != set(expected):
        raise CheckpointShapeError("checkpoint tensor names do not match its config")
    for name, shape in expected.items():
        if tuple(listed[name]["shape"]) != shape:
            raise CheckpointShapeError(f"{name}: manifest shape {listed[name]['shape']} != config shape {list(shape)}")
    blob = (path / BLOB).read_bytes()
    total = sum(4 * math.prod(s) for s in expected.values())
    if len(blob) != total or manifest.get("blob_bytes") != total:
        raise CheckpointTruncatedError(f"blob has {len(blob)} bytes, manifest expects {total}")
    params = {}
    for name, shape in expected.items():
        off = listed[name]["offset"]
        n = math.prod(shape)
        if off + 4 * n > len(blob):
            raise CheckpointTruncatedError(f"{name} extends past the end of the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        params[name] = torch.from_numpy(arr.astype(np.float32))
    return params, config, manifest.get("extra", {})
