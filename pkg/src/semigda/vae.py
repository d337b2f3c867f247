"""Small convolutional VAE used as the frozen encoder/decoder pair.

The encoder exposes its intermediate feature maps (one per downsampling
level) and the decoder accepts an additive skip tensor at each of its
matching resolutions. With all skips zero the decoder is a plain VAE decoder.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .acr import convert_annotation
from .errors import CheckpointError, ShapeError, TrainingError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 4.0


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over a batch of latent grids, shape (N, C_z, H_z, W_z)."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} vs log_std {tuple(self.log_std.shape)}")

    @classmethod
    def from_raw(cls, mean: torch.Tensor, log_std: torch.Tensor) -> "LatentGaussian":
        return cls(mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX))

    @property
    def shape(self):
        return self.mean.shape

    def kl_to_standard_normal(self) -> torch.Tensor:
        """Element-mean KL(q || N(0, I)); always >= 0."""
        var = torch.exp(2 * self.log_std)
        kl = 0.5 * (var + self.mean ** 2 - 1.0) - self.log_std
        return kl.mean()

    def detach(self) -> "LatentGaussian":
        return LatentGaussian(self.mean.detach(), self.log_std.detach())


def sample_latent(dist: LatentGaussian, deterministic: bool = False, seed=None) -> torch.Tensor:
    """Mean when ``deterministic``, otherwise a reparameterized draw.

    ``seed`` may be an int or a ``torch.Generator``.
    """
    if deterministic:
        return dist.mean
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
    log_std = torch.clamp(dist.log_std, LOG_STD_MIN, LOG_STD_MAX)
    eps = torch.randn(dist.mean.shape, generator=gen, dtype=dist.mean.dtype)
    return dist.mean + torch.exp(log_std) * eps


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class DownBlock(nn.Module):
    """Stride-2 conv followed by a plain conv; no residual path."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm = nn.GroupNorm(_groups(cout), cout)
        self.conv = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        x = F.silu(self.norm(self.down(x)))
        return F.silu(self.conv(x))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.silu(self.norm(self.conv1(x)))
        return F.silu(self.conv2(x))


class VAEEncoder(nn.Module):
    def __init__(self, in_channels: int, stem: int, channels: Sequence[int], latent_channels: int):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, stem, 3, padding=1)
        blocks, cin = [], stem
        for c in channels:
            blocks.append(DownBlock(cin, c))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(cin, 2 * latent_channels, 3, padding=1)

    def forward(self, x):
        h = F.silu(self.stem(x))
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        mean, log_std = self.head(h).chunk(2, dim=1)
        return LatentGaussian.from_raw(mean, log_std), feats


class VAEDecoder(nn.Module):
    """Decoder with additive injection points, deepest level first.

    ``skip_channels[i]`` is the channel count injected at bank level ``i``
    (level 0 is the shallowest, highest resolution).
    """

    def __init__(self, latent_channels: int, channels: Sequence[int], out_channels: int = 1):
        super().__init__()
        self.skip_channels = list(channels)
        self.conv_in = nn.Conv2d(latent_channels, channels[-1], 3, padding=1)
        ups = []
        for i in range(len(channels) - 1, -1, -1):
            cout = channels[i - 1] if i > 0 else channels[0]
            ups.append(UpBlock(channels[i], cout))
        self.ups = nn.ModuleList(ups)
        self.conv_out = nn.Conv2d(channels[0], out_channels, 3, padding=1)

    def forward(self, z, skips: Optional[Sequence[torch.Tensor]] = None):
        n_levels = len(self.skip_channels)
        if skips is not None and len(skips) != n_levels:
            raise ShapeError(f"decoder expects {n_levels} skip levels, got {len(skips)}")
        h = F.silu(self.conv_in(z))
        for j, up in enumerate(self.ups):
            level = n_levels - 1 - j
            if skips is not None:
                s = skips[level]
                if s.shape != h.shape:
                    raise ShapeError(
                        f"skip level {level}: expected shape {tuple(h.shape)}, got {tuple(s.shape)}"
                    )
                h = h + s
            h = up(h)
        return torch.tanh(self.conv_out(h))


class VAE(nn.Module):
    """Encoder/decoder pair with a shared latent geometry.

    Encoder input is 3-channel in [-1, 1]; decoder output is 1-channel in
    (-1, 1). The number of skip levels equals log2(downsample).
    """

    def __init__(self, downsample: int = 8, latent_channels: int = 4, stem: int = 16,
                 channels: Optional[Sequence[int]] = None, decoder_channels: Optional[Sequence[int]] = None):
        super().__init__()
        n_levels = int(round(math.log2(downsample)))
        if 2 ** n_levels != downsample or n_levels < 1:
            raise ShapeError(f"downsample must be a power of two >= 2, got {downsample}")
        if channels is None:
            channels = [min(32 * 2 ** i, 64) for i in range(n_levels)]
        if decoder_channels is None:
            decoder_channels = [min(16 * 2 ** i, 64) for i in range(n_levels)]
        if len(channels) != n_levels or len(decoder_channels) != n_levels:
            raise ShapeError("channel lists must have one entry per downsampling level")
        self.downsample = downsample
        self.latent_channels = latent_channels
        self.num_levels = n_levels
        self.config = {
            "downsample": downsample,
            "latent_channels": latent_channels,
            "stem": stem,
            "channels": list(channels),
            "decoder_channels": list(decoder_channels),
        }
        self.encoder = VAEEncoder(3, stem, channels, latent_channels)
        self.decoder = VAEDecoder(latent_channels, decoder_channels, 1)
        self.frozen = False

    @property
    def encoder_channels(self) -> list[int]:
        return list(self.config["channels"])

    @property
    def decoder_channels(self) -> list[int]:
        return list(self.config["decoder_channels"])

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ShapeError(f"input {h}x{w} is not divisible by downsample factor {self.downsample}")

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (self.latent_channels, h // self.downsample, w // self.downsample)

    def bank_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        return [(c, h // 2 ** (i + 1), w // 2 ** (i + 1)) for i, c in enumerate(self.encoder_channels)]

    def injection_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        return [(c, h // 2 ** (i + 1), w // 2 ** (i + 1)) for i, c in enumerate(self.decoder_channels)]

    def encode(self, x: torch.Tensor):
        self.check_input(x)
        return self.encoder(x)

    def decode(self, z: torch.Tensor, skips: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        """Returns (N, H, W) predictions in the ACR value range."""
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"expected latent (N, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        return self.decoder(z, skips).squeeze(1)

    def freeze(self) -> "VAE":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def block_types(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for m in self.encoder.modules():
            name = type(m).__name__
            if name.endswith("Block"):
                counts[name] = counts.get(name, 0) + 1
        return counts

    def content_hash(self) -> str:
        return checkpoint.module_hash(self)


def vae_encode(vae: VAE, x: torch.Tensor):
    return vae.encode(x)


def vae_decode(vae: VAE, z: torch.Tensor, adapted_skips=None) -> torch.Tensor:
    return vae.decode(z, adapted_skips)


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """H x W x 3 arrays in [0, 1] -> (N, 3, H, W) tensor in [-1, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0


def masks_to_tensor(masks: Sequence[np.ndarray], K: int = 2) -> torch.Tensor:
    """Integer masks -> converted (N, 3, H, W) encoder input."""
    conv = np.stack([convert_annotation(m, K).astype(np.float32) for m in masks])
    return torch.from_numpy(conv).unsqueeze(1).expand(-1, 3, -1, -1).contiguous()


def grayscale_target(x: torch.Tensor) -> torch.Tensor:
    """Reconstruction target for a 1-channel decoder: channel mean of the input."""
    return x.mean(dim=1)


def pretrain_vae(corpus, epochs: int = 40, kl_weight: float = 1e-3, *, downsample: int = 8,
                 latent_channels: int = 4, K: int = 2, lr: float = 2e-3, batch_size: int = 16,
                 seed: int = 0, vae: Optional[VAE] = None, log=None):
    """Train reconstruction MSE + kl_weight * KL on images and their converted masks.

    Returns ``(vae, history)`` where ``history`` holds per-epoch mean losses.
    The returned model is not frozen; the caller decides when to freeze.
    """
    if not corpus:
        raise TrainingError("pretrain_vae needs a non-empty corpus")
    torch.manual_seed(seed)
    if vae is None:
        vae = VAE(downsample=downsample, latent_channels=latent_channels)
    vae.train()
    inputs = [images_to_tensor([s.image])[0] for s in corpus]
    inputs += [masks_to_tensor([s.mask], K)[0] for s in corpus if s.mask is not None]
    data = torch.stack(inputs)
    vae.check_input(data[:1])
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    last_good = copy.deepcopy(vae.state_dict())
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        tot_rec = tot_kl = 0.0
        for start in range(0, len(data), batch_size):
            xb = data[order[start:start + batch_size]]
            dist, _ = vae.encode(xb)
            z = sample_latent(dist, deterministic=False, seed=gen)
            recon = vae.decode(z)
            rec = F.mse_loss(recon, grayscale_target(xb))
            kl = dist.kl_to_standard_normal()
            loss = rec + kl_weight * kl
            if not torch.isfinite(loss):
                vae.load_state_dict(last_good)
                raise TrainingError(
                    f"VAE pretraining diverged at epoch {epoch}",
                    {"recon": float(rec), "kl": float(kl), "last_good": last_good},
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot_rec += rec.item() * len(xb)
            tot_kl += kl.item() * len(xb)
        record = {"epoch": epoch, "recon": tot_rec / len(data), "kl": tot_kl / len(data)}
        history.append(record)
        last_good = copy.deepcopy(vae.state_dict())
        if log is not None:
            log(record)
    vae.eval()
    return vae, history


@torch.no_grad()
def reconstruction_mse(vae: VAE, samples, batch_size: int = 32) -> float:
    """Mean-latent, zero-skip reconstruction error against the grayscale target."""
    errs = []
    for start in range(0, len(samples), batch_size):
        x = images_to_tensor([s.image for s in samples[start:start + batch_size]])
        dist, _ = vae.encode(x)
        errs.append(((vae.decode(dist.mean) - grayscale_target(x)) ** 2).mean(dim=(1, 2)))
    return float(torch.cat(errs).mean())


def save_vae(vae: VAE, path) -> str:
    state = vae.state_dict()
    digest = checkpoint.tensor_hash(state)
    manifest = {
        "kind": "vae",
        "config": vae.config,
        "num_levels": vae.num_levels,
        "frozen": bool(vae.frozen),
        "content_hash": digest,
    }
    checkpoint.write(path, {f"vae.{k}": v for k, v in state.items()}, manifest)
    return digest


def vae_from_state(config: dict, state: dict, frozen: bool) -> VAE:
    vae = VAE(**config)
    vae.load_state_dict(state)
    if frozen:
        vae.freeze()
    return vae


def load_vae(path) -> VAE:
    tensors, manifest = checkpoint.read(path)
    if manifest.get("kind") != "vae":
        raise CheckpointError(f"{path}: not a VAE checkpoint (kind={manifest.get('kind')})")
    state = checkpoint.split_groups(tensors, "vae")
    checkpoint.verify_hash(state, manifest["content_hash"], "vae")
    return vae_from_state(manifest["config"], state, manifest["frozen"])
