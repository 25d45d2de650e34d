"""Frozen convolutional encoder mapping RGB images to a compact latent grid.

Stands in for a pretrained VAE-style encoder: a stack of stride-2 convs with
SiLU between them and no normalization. Weights are created once from a seed,
digested, and never trained. Encoding is deterministic (the latent is the
network output directly, no sampled noise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core_types import ModelConfig, RgbImage
from .digests import parameter_digest
from .param_init import seeded_init_


@dataclass(frozen=True)
class LatentTensor:
    """Latent grid (C_lat, H/f, W/f) plus the geometry it came from."""

    data: torch.Tensor
    downsample_factor: int
    source_hw: tuple[int, int]


@dataclass(frozen=True)
class FrozenWeights:
    """Immutable encoder weights with a recomputable content digest."""

    state: dict[str, torch.Tensor]
    digest: str
    seed: int
    latent_downsample: int
    latent_channels: int

    def recompute_digest(self) -> str:
        return parameter_digest(self.state)


def encoder_layer_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    """(in_channels, out_channels) per stride-2 conv, one per factor of two."""
    n_layers = int(round(math.log2(config.latent_downsample)))
    widths = [3] + [16 * 2 ** i for i in range(n_layers - 1)] + [config.latent_channels]
    return list(zip(widths[:-1], widths[1:]))


class FrozenLatentEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.downsample_factor = config.latent_downsample
        self.latent_channels = config.latent_channels
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            for cin, cout in encoder_layer_shapes(config)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.nn.functional.silu(x)
        return x


def init_frozen_encoder(seed: int, config: ModelConfig) -> FrozenWeights:
    """Create encoder weights deterministically from a seed and digest them."""
    module = FrozenLatentEncoder(config)
    gen = torch.Generator().manual_seed(seed)
    seeded_init_(module, gen)
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return FrozenWeights(
        state=state,
        digest=parameter_digest(state),
        seed=seed,
        latent_downsample=config.latent_downsample,
        latent_channels=config.latent_channels,
    )


def encoder_from_weights(weights: FrozenWeights, config: ModelConfig | None = None) -> FrozenLatentEncoder:
    if config is None:
        config = ModelConfig(
            latent_downsample=weights.latent_downsample,
            latent_channels=weights.latent_channels,
        )
    module = FrozenLatentEncoder(config)
    module.load_state_dict(weights.state)
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def encode_latent(image: RgbImage, weights: FrozenWeights) -> LatentTensor:
    """Encode one image into its latent grid.

    Pure with respect to the weights: no state is mutated and the same image
    always produces bit-identical latents. H and W must be divisible by the
    downsample factor; callers that cannot guarantee that should pad first.
    """
    f = weights.latent_downsample
    h, w = image.height, image.width
    if h % f != 0 or w % f != 0:
        raise ValueError(
            f"image size {h}x{w} not divisible by downsample factor {f}; pad or crop first")
    from .data_pipeline import to_model_range

    module = encoder_from_weights(weights)
    x = torch.from_numpy(to_model_range(image.data)).unsqueeze(0)
    with torch.no_grad():
        z = module(x)[0]
    return LatentTensor(data=z, downsample_factor=f, source_hw=(h, w))
