"""Annotation conversion and reversion between class masks and VAE value space."""

from __future__ import annotations

import numpy as np
import torch

from .errors import DomainError


def _check_k(K: int) -> None:
    if K < 2:
        raise DomainError(f"K must be >= 2, got {K}")


def convert_annotation(mask, K: int = 2):
    """Map class ids in [0, K) to ``2 * mask / K - 1``.

    Accepts numpy arrays or tensors and returns the same kind (float).
    """
    _check_k(K)
    if isinstance(mask, torch.Tensor):
        if mask.numel() and (mask.min() < 0 or mask.max() >= K):
            raise DomainError(f"mask values must lie in [0, {K})")
        dtype = mask.dtype if mask.is_floating_point() else torch.float32
        return 2.0 * mask.to(dtype) / K - 1.0
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= K):
        raise DomainError(f"mask values must lie in [0, {K})")
    return (2.0 * mask / K - 1.0).astype(np.float32 if mask.dtype != np.float64 else np.float64)


def revert_annotation(cont, K: int = 2):
    """Nearest-class inverse of :func:`convert_annotation`, clamped to [0, K-1].

    Halfway values round up, matching the ties-to-foreground threshold rule.
    """
    _check_k(K)
    if isinstance(cont, torch.Tensor):
        return torch.clamp(torch.floor((cont + 1.0) * K / 2.0 + 0.5), 0, K - 1).to(torch.int64)
    cont = np.asarray(cont, dtype=np.float64)
    return np.clip(np.floor((cont + 1.0) * K / 2.0 + 0.5), 0, K - 1).astype(np.int64)


def soft_foreground(cont, K: int = 2):
    """Differentiable foreground map: 0 at background value, 1 at class K-1."""
    _check_k(K)
    if isinstance(cont, torch.Tensor):
        return torch.clamp((cont + 1.0) * K / 2.0, 0.0, 1.0)
    return np.clip((np.asarray(cont) + 1.0) * K / 2.0, 0.0, 1.0)
