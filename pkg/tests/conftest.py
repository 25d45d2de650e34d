import numpy as np
import pytest
import torch

from latentdepth.core_types import DepthMap, ModelConfig, RgbImage, RgbdSample
from latentdepth.data_pipeline import SyntheticSceneSpec, generate_synthetic
from latentdepth.model import DepthEstimationModel


def make_tiny_config(**overrides):
    """Smallest config that still exercises every module."""
    kw = dict(
        latent_downsample=2,
        latent_channels=2,
        d_sem=4,
        n_local=2,
        n_global=1,
        unet_base_channels=2,
        unet_levels=2,
        diffusion_T=8,
        n_heads=1,
        sem_levels=2,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def make_samples(n, seed0=100, height=64, width=64, sparsity=1.0):
    return [
        generate_synthetic(
            SyntheticSceneSpec(seed=seed0 + i, height=height, width=width, sparsity=sparsity)
        )
        for i in range(n)
    ]


def dense_sample(height=64, width=64, lo=2.0, hi=20.0, seed=0):
    """Fully valid sample with a smooth analytic depth field."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    depth = (lo + (hi - lo) * (xx + yy) / float(height + width - 2)).astype(np.float32)
    image = rng.uniform(0.1, 0.9, size=(3, height, width)).astype(np.float32)
    return RgbdSample(
        image=RgbImage(image),
        depth=DepthMap(depth, np.ones((height, width), dtype=bool)),
        frame_id=f"dense_{seed:04d}",
    )


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def tiny_config():
    return make_tiny_config()


@pytest.fixture(scope="session")
def toy_model(toy_config):
    # Shared read-only instance; tests that mutate weights build their own.
    return DepthEstimationModel(toy_config, seed=0)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return DepthEstimationModel(tiny_config, seed=0)


@pytest.fixture()
def torch_gen():
    return torch.Generator().manual_seed(0)
