"""Trainable residual encoder producing the mask-aligned latent and its feature bank."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .vae import LatentGaussian


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if ch % 4 == 0 else 1, ch)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _gn(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _gn(cout))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + identity)


class TrainableEncoder(nn.Module):
    """ResNet-style encoder: a stem, then one stride-2 stage per level.

    Each stage is ``blocks_per_stage`` residual blocks, the first of which
    downsamples. Stage outputs form the feature bank; a pair of 1x1 convs on
    the last stage gives the latent mean and log-std.
    """

    def __init__(self, num_levels: int = 3, latent_channels: int = 4, stem: int = 16,
                 channels: Sequence[int] = (24, 48, 64), blocks_per_stage: int = 2):
        super().__init__()
        if len(channels) != num_levels:
            raise ShapeError(f"need {num_levels} stage widths, got {len(channels)}")
        self.num_levels = num_levels
        self.downsample = 2 ** num_levels
        self.latent_channels = latent_channels
        self.channels = list(channels)
        self.stem = nn.Sequential(nn.Conv2d(3, stem, 3, padding=1, bias=False), _gn(stem), nn.ReLU())
        stages, cin = [], stem
        for c in channels:
            blocks = [ResidualBlock(cin, c, stride=2)]
            blocks += [ResidualBlock(c, c) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.mean_head = nn.Conv2d(cin, latent_channels, 1)
        self.log_std_head = nn.Conv2d(cin, latent_channels, 1)

    def forward(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] % self.downsample or x.shape[-1] % self.downsample:
            raise ShapeError(f"input {tuple(x.shape[-2:])} is not divisible by {self.downsample}")
        h = self.stem(x)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return LatentGaussian.from_raw(self.mean_head(h), self.log_std_head(h)), feats

    def block_types(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for m in self.modules():
            name = type(m).__name__
            if name.endswith("Block"):
                counts[name] = counts.get(name, 0) + 1
        return counts


def encode_image_trainable(x: torch.Tensor, encoder: TrainableEncoder):
    return encoder(x)
