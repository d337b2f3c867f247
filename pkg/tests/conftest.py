import os
import sys

import pytest
import torch

from semigda.config import TrainConfig
from semigda.dataset import SyntheticConfig, generate_synthetic_corpus, semi_split
from semigda.vae import VAE, load_vae, pretrain_vae


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SyntheticConfig(num_samples=40, image_size=32, downsample=4, seed=5))


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return semi_split(small_corpus, 0.25, seed=0)


@pytest.fixture(scope="session")
def pretrained_vae():
    """Default-geometry backbone pretrained on a 300-sample corpus; about five minutes.

    ``SEMIGDA_ACCEPT_VAE`` may name a ``pretrain-vae`` checkpoint to reuse instead.
    """
    cached = os.environ.get("SEMIGDA_ACCEPT_VAE")
    if cached:
        return load_vae(cached)
    corpus = generate_synthetic_corpus(SyntheticConfig(num_samples=300, seed=0))
    model, _ = pretrain_vae(corpus, epochs=40, kl_weight=1e-3, seed=0)
    return model.freeze()


@pytest.fixture(scope="session")
def small_vae():
    torch.manual_seed(0)
    return VAE(downsample=4, latent_channels=4).freeze()


@pytest.fixture
def small_config():
    return TrainConfig(image_size=32, downsample=4, stage1_epochs=1, stage2_epochs=2, lr=1e-3,
                       mapper_width=32, mapper_heads=2, seed=0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
    missing = [n for n in range(1, 12) if n not in results]
    if missing:
        terminalreporter.write_line(f"not run: {missing}")
