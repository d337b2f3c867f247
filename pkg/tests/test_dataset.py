import numpy as np
import pytest
from PIL import Image

from semigda.dataset import (BatchIterator, ImageSample, SyntheticConfig, generate_synthetic_corpus,
                             load_corpus, save_corpus, semi_split)
from semigda.errors import ConfigError, IngestionError


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SyntheticConfig(num_samples=100, seed=3))


def _bytes(samples):
    return b"".join(s.image.tobytes() + s.mask.tobytes() for s in samples)


def test_generation_deterministic():
    cfg = SyntheticConfig(num_samples=12, seed=7)
    assert _bytes(generate_synthetic_corpus(cfg)) == _bytes(generate_synthetic_corpus(cfg))


def test_different_seeds_differ():
    a = generate_synthetic_corpus(SyntheticConfig(num_samples=3, seed=1))
    b = generate_synthetic_corpus(SyntheticConfig(num_samples=3, seed=2))
    assert _bytes(a) != _bytes(b)


def test_counts_ranges_and_nonempty(corpus):
    assert len(corpus) == 100
    for s in corpus:
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.mask.any()


@pytest.mark.parametrize("texture", ["flat", "gradient", "perlin"])
def test_textures(texture):
    samples = generate_synthetic_corpus(SyntheticConfig(num_samples=4, texture=texture, seed=0))
    assert all(s.mask.any() for s in samples)


def test_foreground_fraction_regression():
    # measured on this generator: 0.10673 over 1000 samples (seed 0)
    samples = generate_synthetic_corpus(SyntheticConfig(num_samples=1000, seed=0))
    frac = np.mean([s.mask.mean() for s in samples])
    assert 0.05 <= frac <= 0.40
    assert frac == pytest.approx(0.10673, abs=1e-4)


def test_image_correlates_with_mask(corpus):
    # red-minus-green is higher inside the foreground on average
    gaps = []
    for s in corpus[:30]:
        rg = s.image[..., 0] - s.image[..., 1]
        gaps.append(rg[s.mask == 1].mean() - rg[s.mask == 0].mean())
    assert np.mean(gaps) > 0.1


def test_indivisible_size_rejected():
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(SyntheticConfig(num_samples=2, image_size=60))


def test_nonpositive_count_rejected():
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(SyntheticConfig(num_samples=0))


def _write_png(path, arr, mode):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path)


def test_load_labeled_and_unlabeled(tmp_path):
    _write_png(tmp_path / "images/a.png", np.zeros((8, 8, 3), np.uint8), "RGB")
    _write_png(tmp_path / "masks/a.png", np.eye(8, dtype=np.uint8), "L")
    _write_png(tmp_path / "images/b.png", np.full((8, 8, 3), 255, np.uint8), "RGB")
    samples = {s.id: s for s in load_corpus(tmp_path)}
    assert samples["a"].labeled and samples["a"].mask.sum() == 8
    assert not samples["b"].labeled and samples["b"].mask is None
    assert samples["b"].image.max() == 1.0


def test_load_rejects_class_value_k(tmp_path):
    _write_png(tmp_path / "images/a.png", np.zeros((8, 8, 3), np.uint8), "RGB")
    _write_png(tmp_path / "masks/a.png", np.full((8, 8), 2, np.uint8), "L")
    with pytest.raises(IngestionError, match="a.png"):
        load_corpus(tmp_path, num_classes=2)


def test_load_rejects_size_mismatch(tmp_path):
    _write_png(tmp_path / "images/a.png", np.zeros((8, 8, 3), np.uint8), "RGB")
    _write_png(tmp_path / "masks/a.png", np.zeros((4, 8), np.uint8), "L")
    with pytest.raises(IngestionError, match="a.png"):
        load_corpus(tmp_path)


def test_save_load_round_trip(tmp_path, corpus):
    save_corpus(corpus[:5], tmp_path)
    back = load_corpus(tmp_path)
    assert [s.id for s in back] == [s.id for s in corpus[:5]]
    for a, b in zip(corpus[:5], back):
        assert np.array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def test_split_sizes(corpus):
    split = semi_split(corpus, 0.1, seed=0)
    assert len(split.val) == 10 and len(split.test) == 20
    assert len(split.labeled) == 7 and len(split.unlabeled) == 63


def test_split_full_ratio(corpus):
    split = semi_split(corpus, 1.0, seed=0)
    assert len(split.labeled) == 70 and split.unlabeled == []


def test_split_deterministic_and_disjoint(corpus):
    a, b = semi_split(corpus, 0.2, seed=5), semi_split(corpus, 0.2, seed=5)
    assert [s.id for s in a.labeled] == [s.id for s in b.labeled]
    assert [s.id for s in a.unlabeled] == [s.id for s in b.unlabeled]
    ids_l = {s.id for s in a.labeled}
    ids_u = {s.id for s in a.unlabeled}
    assert not ids_l & ids_u
    assert not (ids_l | ids_u) & {s.id for s in a.val + a.test}


def test_split_strips_unlabeled_masks(corpus):
    split = semi_split(corpus, 0.1, seed=0)
    assert all(s.mask is None and not s.labeled for s in split.unlabeled)
    s = split.unlabeled[0]
    original = next(c for c in corpus if c.id == s.id)
    assert np.array_equal(split.withheld_mask(s.id), original.mask)


def test_split_zero_labeled_rejected():
    small = generate_synthetic_corpus(SyntheticConfig(num_samples=10, seed=0))
    with pytest.raises(ConfigError):
        semi_split(small, 0.01)
    with pytest.raises(ConfigError):
        semi_split(small, 0.0)


def test_batches_default_composition(corpus):
    split = semi_split(corpus, 0.1, seed=0)
    it = BatchIterator(split, 2, 2, seed=0)
    for batch, _ in zip(it, range(20)):
        assert len(batch.labeled) == 2 and all(s.mask is not None for s in batch.labeled)
        assert len(batch.unlabeled) == 2 and all(s.mask is None for s in batch.unlabeled)


def test_supervised_only_batches(corpus):
    split = semi_split(corpus, 0.1, seed=0)
    batch = BatchIterator(split, 2, 0).batch_at(0)
    assert len(batch.labeled) == 2 and batch.unlabeled == []


def test_epoch_wraps_around(corpus):
    split = semi_split(corpus, 0.1, seed=0)  # 7 labeled
    it = BatchIterator(split, 2, 2, seed=1)
    assert it.steps_per_epoch == 4
    ids = [s.id for b in it.epoch(0) for s in b.labeled]
    assert len(ids) == 8
    assert set(ids[:7]) == {s.id for s in split.labeled}


def test_batches_reproducible(corpus):
    split = semi_split(corpus, 0.1, seed=0)
    a = [[s.id for s in b.labeled + b.unlabeled] for b, _ in zip(BatchIterator(split, seed=4), range(30))]
    b = [[s.id for s in BatchIterator(split, seed=4).batch_at(k).labeled + BatchIterator(split, seed=4).batch_at(k).unlabeled] for k in range(30)]
    assert a == b


def test_empty_labeled_rejected(corpus):
    split = semi_split(corpus, 0.1, seed=0)
    split.labeled = []
    with pytest.raises(ConfigError):
        BatchIterator(split)
