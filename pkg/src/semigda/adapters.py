"""Skip adapters that inject encoder features into the frozen decoder."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

ROLES = ("image", "mask")


class LevelAdapter(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cin, 3, padding=1)
        self.proj = nn.Conv2d(cin, cout, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        return self.proj(F.silu(self.conv(x)))


class AdapterBank(nn.Module):
    """One conv -> SiLU -> zero-init 1x1 projection per skip level."""

    def __init__(self, in_channels: Sequence[int], out_channels: Sequence[int], role: str):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        if len(in_channels) != len(out_channels):
            raise ShapeError("adapter needs matching in/out level counts")
        self.role = role
        self.in_channels = list(in_channels)
        self.out_channels = list(out_channels)
        self.levels = nn.ModuleList([LevelAdapter(i, o) for i, o in zip(in_channels, out_channels)])

    def forward(self, bank: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(bank) != len(self.levels):
            raise ShapeError(f"{self.role} adapter expects {len(self.levels)} levels, got {len(bank)}")
        base = bank[0].shape[-2:]
        out = []
        for i, (feat, layer) in enumerate(zip(bank, self.levels)):
            if feat.shape[1] != self.in_channels[i]:
                raise ShapeError(
                    f"{self.role} adapter level {i}: expected {self.in_channels[i]} channels, got {feat.shape[1]}"
                )
            expected = (base[0] // 2 ** i, base[1] // 2 ** i)
            if tuple(feat.shape[-2:]) != expected:
                raise ShapeError(
                    f"{self.role} adapter level {i}: expected resolution {expected}, got {tuple(feat.shape[-2:])}"
                )
            out.append(layer(feat))
        return out


def adapt_features(bank: Sequence[torch.Tensor], adapter: AdapterBank) -> list[torch.Tensor]:
    return adapter(bank)


def decode_branch(vae, latent: torch.Tensor, bank: Sequence[torch.Tensor],
                  adapter: Optional[AdapterBank], role: Optional[str] = None) -> torch.Tensor:
    """Adapt ``bank`` and decode ``latent`` through the frozen decoder.

    ``adapter=None`` decodes without skips (adapter ablation). ``role``, when
    given, must match the adapter's tag.
    """
    if adapter is None:
        return vae.decode(latent)
    if role is not None and adapter.role != role:
        raise ValueError(f"{role} branch wired to the {adapter.role} adapter")
    return vae.decode(latent, adapter(bank))
