"""Synthetic corpus generation, on-disk ingestion and semi-supervised splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestionError

TEXTURES = ("flat", "gradient", "perlin")

# foreground objects are brighter and red-shifted, distractors darker and green-shifted
_FG_TINT = np.array([1.0, 0.35, 0.1])
_DISTRACTOR_TINT = np.array([-0.5, 0.45, -0.6])

VAL_FRACTION = 0.1
TEST_FRACTION = 0.2


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: Optional[np.ndarray] = None  # H x W, int64 class ids
    labeled: bool = True

    def stripped(self) -> "ImageSample":
        return ImageSample(self.id, self.image, None, False)


@dataclass
class SyntheticConfig:
    num_samples: int = 300
    image_size: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    noise_std: float = 0.08
    texture: str = "perlin"
    seed: int = 0
    distractors: tuple[int, int] = (0, 2)
    downsample: int = 8

    def validate(self) -> None:
        if self.num_samples <= 0:
            raise ConfigError("num_samples must be positive")
        if self.image_size <= 0 or self.image_size % self.downsample:
            raise ConfigError(
                f"image_size={self.image_size} is not divisible by the VAE "
                f"downsample factor {self.downsample}"
            )
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad shapes_per_image range {self.shapes_per_image}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.standard_normal((cells + 1, cells + 1))
    coords = np.linspace(0, cells, size)
    i0 = np.clip(np.floor(coords).astype(int), 0, cells - 1)
    frac = coords - i0
    # smoothstep fade so cell edges do not show
    frac = frac * frac * (3 - 2 * frac)
    r0, r1 = i0[:, None], i0[:, None] + 1
    c0, c1 = i0[None, :], i0[None, :] + 1
    fy, fx = frac[:, None], frac[None, :]
    top = grid[r0, c0] * (1 - fx) + grid[r0, c1] * fx
    bottom = grid[r1, c0] * (1 - fx) + grid[r1, c1] * fx
    return top * (1 - fy) + bottom * fy


def _background(rng: np.random.Generator, size: int, texture: str) -> np.ndarray:
    base = rng.uniform(0.3, 0.6, size=3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    if texture == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
        ramp = np.cos(theta) * xs + np.sin(theta) * ys
        img += rng.uniform(0.1, 0.3) * ramp[..., None]
    elif texture == "perlin":
        lum = 0.12 * _smooth_noise(rng, size, 3) + 0.06 * _smooth_noise(rng, size, 7)
        chroma = 0.04 * _smooth_noise(rng, size, 4)
        img += lum[..., None]
        img[..., 0] += chroma
        img[..., 1] -= chroma
    return img


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """One random ellipse, optionally perturbed into a blob."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    ry, rx = rng.uniform(0.07, 0.2, size=2) * size
    rot = rng.uniform(0, np.pi)
    dy, dx = ys - cy, xs - cx
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = -dx * np.sin(rot) + dy * np.cos(rot)
    radius = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    if rng.random() < 0.5:
        ang = np.arctan2(v, u)
        wobble = 1.0
        for k in (2, 3, 5):
            wobble = wobble + rng.uniform(-0.12, 0.12) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
        radius = radius / wobble
    return radius <= 1.0


def _one_sample(cfg: SyntheticConfig, index: int) -> ImageSample:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    img = _background(rng, size, cfg.texture)
    mask = np.zeros((size, size), dtype=np.int64)

    n_distract = rng.integers(cfg.distractors[0], cfg.distractors[1] + 1)
    for _ in range(n_distract):
        region = _shape_mask(rng, size)
        img[region] += rng.uniform(0.1, 0.25) * _DISTRACTOR_TINT

    n_shapes = rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1)
    placed = 0
    while placed < n_shapes or not mask.any():
        region = _shape_mask(rng, size)
        if not region.any():
            continue
        contrast = rng.uniform(0.12, 0.3)
        img[region] = img[region] * 0.85 + 0.15 * img[region].mean() + contrast * _FG_TINT
        mask[region] = 1
        placed += 1

    img += cfg.noise_std * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageSample(id=f"syn{index:05d}", image=img, mask=mask, labeled=True)


def generate_synthetic_corpus(cfg: SyntheticConfig) -> list[ImageSample]:
    """Deterministic ellipse/blob corpus; sample ``i`` depends only on (seed, i)."""
    cfg.validate()
    return [_one_sample(cfg, i) for i in range(cfg.num_samples)]


def save_corpus(samples: Sequence[ImageSample], root: Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{s.id}.png")


def load_corpus(dir_path, num_classes: int = 2) -> list[ImageSample]:
    """Load ``<root>/images/*.png`` with optional ``<root>/masks/<stem>.png``.

    Images without a mask file come back unlabeled.
    """
    root = Path(dir_path)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise IngestionError(f"{img_dir} does not exist")
    samples = []
    for path in sorted(img_dir.glob("*.png")):
        image = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        mask_path = root / "masks" / path.name
        mask = None
        if mask_path.exists():
            mask = np.asarray(Image.open(mask_path).convert("L"), dtype=np.int64)
            if mask.shape != image.shape[:2]:
                raise IngestionError(
                    f"{mask_path}: mask size {mask.shape} does not match image size {image.shape[:2]}"
                )
            if mask.max(initial=0) >= num_classes:
                raise IngestionError(
                    f"{mask_path}: mask value {int(mask.max())} >= num_classes={num_classes}"
                )
        samples.append(ImageSample(id=path.stem, image=image, mask=mask, labeled=mask is not None))
    return samples


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SemiSplit:
    labeled: list[ImageSample]
    unlabeled: list[ImageSample]
    val: list[ImageSample]
    test: list[ImageSample]
    labeled_ratio: float
    seed: int
    # masks of the unlabeled pool, kept out of the samples themselves
    _withheld: dict = field(default_factory=dict, repr=False)

    def withheld_mask(self, sample_id: str) -> Optional[np.ndarray]:
        """Ground truth of an unlabeled sample, for oracle evaluation only."""
        return self._withheld.get(sample_id)


def semi_split(corpus: Sequence[ImageSample], labeled_ratio: float, seed: int = 0) -> SemiSplit:
    if not 0 < labeled_ratio <= 1:
        raise ConfigError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_val = _round_half_up(VAL_FRACTION * n)
    n_test = _round_half_up(TEST_FRACTION * n)
    val = [corpus[i] for i in order[:n_val]]
    test = [corpus[i] for i in order[n_val:n_val + n_test]]
    train = [corpus[i] for i in order[n_val + n_test:]]
    n_lab = _round_half_up(labeled_ratio * len(train))
    if n_lab == 0:
        raise ConfigError(
            f"labeled_ratio={labeled_ratio} yields no labeled samples out of {len(train)}"
        )
    labeled = []
    for s in train[:n_lab]:
        if s.mask is None:
            raise ConfigError(f"sample {s.id} was drawn as labeled but has no mask")
        labeled.append(ImageSample(s.id, s.image, s.mask, True))
    unlabeled = [s.stripped() for s in train[n_lab:]]
    withheld = {s.id: s.mask for s in train[n_lab:] if s.mask is not None}
    return SemiSplit(labeled, unlabeled, val, test, labeled_ratio, seed, withheld)


@dataclass
class Batch:
    step: int
    labeled: list[ImageSample]
    unlabeled: list[ImageSample]


class BatchIterator:
    """Mixed labeled/unlabeled batches, addressable by global step.

    Each pool is an endless stream of reshuffled passes, so the batch at any
    step is a pure function of ``(split, sizes, seed, step)``. That is what
    lets a resumed run see exactly the batches an uninterrupted one would.
    One epoch is ``ceil(n_labeled / batch_labeled)`` steps.
    """

    def __init__(self, split: SemiSplit, batch_labeled: int = 2, batch_unlabeled: int = 2, seed: int = 0):
        if not split.labeled:
            raise ConfigError("labeled set is empty")
        if batch_labeled < 1:
            raise ConfigError("batch_labeled must be >= 1")
        if batch_unlabeled < 0:
            raise ConfigError("batch_unlabeled must be >= 0")
        if batch_unlabeled > 0 and not split.unlabeled:
            raise ConfigError("batch_unlabeled > 0 but the unlabeled set is empty")
        self.split = split
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.seed = seed
        self.steps_per_epoch = math.ceil(len(split.labeled) / batch_labeled)

    @lru_cache(maxsize=64)
    def _perm(self, stream: int, cycle: int) -> np.ndarray:
        n = len(self.split.labeled) if stream == 0 else len(self.split.unlabeled)
        return np.random.default_rng([self.seed, stream, cycle]).permutation(n)

    def _take(self, stream: int, pool: Sequence[ImageSample], start: int, count: int) -> list[ImageSample]:
        n = len(pool)
        out = []
        for pos in range(start, start + count):
            out.append(pool[self._perm(stream, pos // n)[pos % n]])
        return out

    def batch_at(self, step: int) -> Batch:
        lab = self._take(0, self.split.labeled, step * self.batch_labeled, self.batch_labeled)
        unl = []
        if self.batch_unlabeled:
            unl = self._take(1, self.split.unlabeled, step * self.batch_unlabeled, self.batch_unlabeled)
        return Batch(step, lab, unl)

    def epoch(self, index: int) -> Iterator[Batch]:
        start = index * self.steps_per_epoch
        for step in range(start, start + self.steps_per_epoch):
            yield self.batch_at(step)

    def __iter__(self) -> Iterator[Batch]:
        step = 0
        while True:
            yield self.batch_at(step)
            step += 1


def batch_iterator(split: SemiSplit, batch_labeled: int = 2, batch_unlabeled: int = 2, seed: int = 0) -> BatchIterator:
    return BatchIterator(split, batch_labeled, batch_unlabeled, seed)
