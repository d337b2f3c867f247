"""Self-attention latent mapping network.

Maps the frozen VAE's image latent towards the mask latent manifold. The
output heads are zero-initialized and added to the input, so the freshly
built network is the identity on the mean path.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ShapeError
from .vae import LatentGaussian


class AttentionBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class LatentMapper(nn.Module):
    def __init__(self, latent_channels: int = 4, grid: tuple[int, int] = (8, 8), width: int = 128,
                 depth: int = 2, heads: int = 4):
        super().__init__()
        self.latent_channels = latent_channels
        self.grid = tuple(grid)
        n_tokens = grid[0] * grid[1]
        self.embed = nn.Linear(latent_channels, width)
        self.pos = nn.Parameter(torch.randn(1, n_tokens, width) * 0.02)
        self.blocks = nn.ModuleList([AttentionBlock(width, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, 2 * latent_channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z: LatentGaussian) -> LatentGaussian:
        mean = z.mean
        n, c, h, w = mean.shape
        if c != self.latent_channels or (h, w) != self.grid:
            raise ShapeError(
                f"mapper configured for {(self.latent_channels, *self.grid)}, got {(c, h, w)}"
            )
        tokens = mean.flatten(2).transpose(1, 2)  # N, h*w, C
        x = self.embed(tokens) + self.pos
        for block in self.blocks:
            x = block(x)
        delta = self.out(self.norm(x)).transpose(1, 2).reshape(n, 2 * c, h, w)
        d_mean, d_log_std = delta.chunk(2, dim=1)
        return LatentGaussian.from_raw(mean + d_mean, z.log_std + d_log_std)


def map_latent(z_v: LatentGaussian, mapper: LatentMapper) -> LatentGaussian:
    return mapper(z_v)
