"""Checkpoint container: safetensors blob plus a JSON manifest in its metadata."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .errors import CheckpointError

FORMAT_VERSION = 1


def tensor_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    """sha256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.reshape(-1).view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensor_hash(module.state_dict())


def write(path, tensors: Mapping[str, torch.Tensor], manifest: dict) -> None:
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = {k: list(v.shape) for k, v in sorted(tensors.items())}
    payload = {k: v.detach().contiguous().cpu().clone() for k, v in tensors.items()}
    blob = st_save(payload, metadata={"manifest": json.dumps(manifest, sort_keys=True)})
    Path(path).write_bytes(blob)


def read(path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    header_len = int.from_bytes(raw[:8], "little")
    try:
        header = json.loads(raw[8:8 + header_len])
        manifest = json.loads(header["__metadata__"]["manifest"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}"
        )
    try:
        tensors = st_load(raw)
    except Exception as exc:  # safetensors raises its own error types
        raise CheckpointError(f"{path}: corrupt tensor blob ({exc})") from exc
    return tensors, manifest


def split_groups(tensors: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def verify_hash(tensors: Mapping[str, torch.Tensor], expected: str, what: str) -> None:
    actual = tensor_hash(tensors)
    if actual != expected:
        raise CheckpointError(f"hash mismatch for {what}: stored {expected[:12]}, computed {actual[:12]}")
