"""Depth decoder head and the scale-invariant log depth loss.

Decodes the UNet's multi-resolution features into a metric depth map:
per-stage stride-2 deconvolution + conv, fused with the next finer feature
map through a 1x1 projection, then repeated x2 bilinear upsampling back to
image resolution and a sigmoid head scaled to [min_depth, max_depth].

The trunk is bias-free and the head bias is zero-initialized, so all-zero
features decode to a constant map at the exact midpoint of the depth range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import DepthMap, ModelConfig
from .denoising_unet import decoder_feature_channels

SILOG_LAMBDA = 0.85


@dataclass(frozen=True)
class DepthPrediction:
    """Predicted metric depth, float32 (H, W), every pixel populated."""

    data: np.ndarray


class DepthDecoder(nn.Module):
    ZERO_INIT_PARAMS = ("head.bias",)

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = decoder_feature_channels(config)
        self.chans = chans
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose2d(chans[i], chans[i + 1], 4, stride=2, padding=1, bias=False)
            for i in range(len(chans) - 1))
        self.blocks = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1, bias=False)
            for i in range(len(chans) - 1))
        self.fuse = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i + 1], 1, bias=False)
            for i in range(len(chans) - 1))
        n_up = int(round(math.log2(config.latent_downsample)))
        self.up_convs = nn.ModuleList(
            nn.Conv2d(chans[-1], chans[-1], 3, padding=1, bias=False) for _ in range(n_up))
        self.head = nn.Conv2d(chans[-1], 1, 3, padding=1)
        nn.init.zeros_(self.head.bias)

    def forward(self, features: list[torch.Tensor], target_hw: tuple[int, int]) -> torch.Tensor:
        """Coarsest-first UNet decoder features to (B, H, W) metric depth."""
        chans = self.chans
        if len(features) != len(chans):
            raise ValueError(f"expected {len(chans)} feature maps, got {len(features)}")
        for f, c in zip(features, chans):
            if f.shape[1] != c:
                raise ValueError(f"feature channel mismatch: expected {chans}, "
                                 f"got {[int(g.shape[1]) for g in features]}")
        x = features[0]
        for i in range(len(chans) - 1):
            x = self.blocks[i](F.silu(self.deconvs[i](x)))
            skip = features[i + 1]
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = x + self.fuse[i](skip)
        for conv in self.up_convs:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.silu(conv(x))
        if x.shape[-2:] != tuple(target_hw):
            x = F.interpolate(x, size=tuple(target_hw), mode="bilinear", align_corners=False)
        logit = self.head(x)
        cfg = self.config
        depth = cfg.min_depth + (cfg.max_depth - cfg.min_depth) * torch.sigmoid(logit)
        return depth.squeeze(1)


def decode_depth(decoder: DepthDecoder, features: list[torch.Tensor],
                 target_hw: tuple[int, int]) -> DepthPrediction:
    """Single-sample wrapper: (C, h, w) features to a DepthPrediction."""
    with torch.no_grad():
        out = decoder([f.unsqueeze(0) for f in features], target_hw)[0]
    return DepthPrediction(out.numpy().astype(np.float32))


def silog_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor,
               lam: float = SILOG_LAMBDA) -> torch.Tensor:
    """Scale-invariant log loss over valid pixels.

    g = log(pred) - log(gt); loss = mean(g^2) - lam * mean(g)^2. Invalid
    pixels contribute nothing: they are excluded by boolean indexing before
    any reduction.
    """
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, "
            f"valid {tuple(valid.shape)}")
    if not bool(valid.any()):
        raise ValueError("depth loss undefined: no valid pixels")
    g = torch.log(pred[valid]) - torch.log(gt[valid])
    return (g * g).mean() - lam * g.mean() ** 2


def depth_loss(pred, gt: DepthMap, lam: float = SILOG_LAMBDA) -> torch.Tensor:
    """SILog loss between a prediction and a ground-truth depth map."""
    data = pred.data if isinstance(pred, DepthPrediction) else pred
    pred_t = torch.as_tensor(np.asarray(data), dtype=torch.float64) \
        if not isinstance(data, torch.Tensor) else data
    gt_t = torch.as_tensor(gt.data, dtype=pred_t.dtype)
    valid = torch.as_tensor(gt.valid_mask)
    return silog_loss(pred_t, gt_t, valid, lam)
