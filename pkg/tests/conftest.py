import numpy as np
import pytest

from metalens.corpus import CORPUS_NOISE, generate_clean_image, image_rng, noise_seed
from metalens.degradation import apply_forward_model, fwhm_grid_from_psfs
from metalens.model import ModelConfig, MultipathModel, train
from metalens.optics import build_psf_grid, toy_spec


@pytest.fixture(scope="session")
def toy_lens():
    return toy_spec()


@pytest.fixture(scope="session")
def toy_grid3(toy_lens):
    return build_psf_grid(toy_lens, 3)


@pytest.fixture(scope="session")
def toy_grid7(toy_lens):
    return build_psf_grid(toy_lens, 7)


@pytest.fixture(scope="session")
def toy_fwhm3(toy_grid3):
    return fwhm_grid_from_psfs(toy_grid3)


@pytest.fixture(scope="session")
def tiny_pairs(toy_grid3):
    pairs = []
    for i in range(16):
        clean = generate_clean_image(64, image_rng(42, i))
        degraded = apply_forward_model(clean, toy_grid3, CORPUS_NOISE.with_seed(noise_seed(42, i)))
        pairs.append((degraded, clean))
    return pairs


@pytest.fixture(scope="session")
def tiny_model(toy_fwhm3, tiny_pairs):
    """Small trained model shared by model/CLI/service tests (mechanics, not quality)."""
    cfg = ModelConfig(grid_n=3, seed=7, base_channels=16, denoiser_channels=32)
    model = MultipathModel(cfg, toy_fwhm3)
    log = train(model, tiny_pairs, steps=220, pretrain_steps=220, batch_size=4, lr=2e-3, log_every=40)
    return model, log


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
