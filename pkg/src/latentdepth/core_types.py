"""Shared data model: images, depth maps, paired samples, and model configuration.

Conventions used across the package:
  * RGB images are float32 arrays shaped (3, H, W) with values in [0, 1].
  * Depth maps are float32 arrays shaped (H, W) holding meters; the value 0
    marks an invalid pixel and never occurs on a valid one.
  * On disk a sample is an 8-bit RGB PNG plus a 16-bit depth PNG storing
    round(depth_m * 256), so depths quantised to 1/256 m round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_PNG_SCALE = 256.0
MIN_MODEL_HW = 32


@dataclass(frozen=True)
class RgbImage:
    """RGB image, float32 (3, H, W), values in [0, 1]."""

    data: np.ndarray

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True)
class DepthMap:
    """Metric depth in meters, (H, W). Invalid pixels are exactly 0."""

    data: np.ndarray
    valid_mask: np.ndarray

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class RgbdSample:
    """An RGB image with its aligned ground-truth depth map."""

    image: RgbImage
    depth: DepthMap
    frame_id: str


@dataclass(frozen=True)
class ModelConfig:
    """Toy-scale architecture and diffusion settings.

    The defaults describe a model small enough to train on CPU while keeping
    every structural element of the full-scale system: a frozen latent
    encoder, a hierarchical semantic encoder with optional dilated-conv and
    spatial-attention enhancements, a conditioned denoising UNet and a depth
    decoder head.
    """

    latent_downsample: int = 8
    latent_channels: int = 4
    d_sem: int = 64
    n_local: int = 16
    n_global: int = 4
    unet_base_channels: int = 32
    unet_levels: int = 3
    use_dilated_conv: bool = True
    use_spatial_attention: bool = True
    diffusion_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_feat: int = 0
    n_heads: int = 4
    sem_levels: int = 3
    max_depth: float = 80.0
    min_depth: float = 1e-3

    @property
    def n_queries(self) -> int:
        return self.n_local + self.n_global

    def validate(self) -> list[str]:
        problems = []
        if self.latent_downsample < 1 or (self.latent_downsample & (self.latent_downsample - 1)) != 0:
            problems.append("latent_downsample: must be a positive power of two")
        for name in ("latent_channels", "d_sem", "n_local", "n_global",
                     "unet_base_channels", "unet_levels", "diffusion_T",
                     "n_heads", "sem_levels"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.d_sem % self.n_heads != 0:
            problems.append("d_sem: must be divisible by n_heads")
        if not (0 < self.min_depth < self.max_depth):
            problems.append("min_depth/max_depth: need 0 < min_depth < max_depth")
        if not (0 <= self.t_feat < self.diffusion_T):
            problems.append("t_feat: must lie in [0, diffusion_T)")
        if not (0 < self.beta_start < self.beta_end < 1):
            problems.append("beta_start/beta_end: need 0 < beta_start < beta_end < 1")
        return problems

    def check(self) -> "ModelConfig":
        problems = self.validate()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        return self


def derive_valid_mask(depth_data: np.ndarray) -> np.ndarray:
    """Boolean mask that is True exactly where depth is nonzero.

    Non-finite depth values indicate a corrupt map and raise instead of being
    silently masked out.
    """
    depth_data = np.asarray(depth_data)
    if not np.isfinite(depth_data).all():
        raise ValueError("corrupt depth map: contains non-finite values")
    return depth_data != 0


def validate_sample(sample: RgbdSample) -> list[str]:
    """Check every structural invariant of a sample.

    Never raises; returns a list of human-readable violations, each naming
    the offending field and rule. An empty list means the sample is valid.
    """
    problems: list[str] = []
    img = np.asarray(sample.image.data)
    dep = np.asarray(sample.depth.data)
    mask = np.asarray(sample.depth.valid_mask)

    if img.ndim != 3 or img.shape[0] != 3:
        problems.append(f"image.data: expected shape (3, H, W), got {img.shape}")
        return problems
    if dep.ndim != 2:
        problems.append(f"depth.data: expected shape (H, W), got {dep.shape}")
        return problems
    if img.shape[1:] != dep.shape:
        problems.append(
            f"depth.data: shape mismatch with image, image is {img.shape[1:]}, depth is {dep.shape}")
        return problems
    if mask.shape != dep.shape:
        problems.append(
            f"depth.valid_mask: shape mismatch with depth, mask is {mask.shape}, depth is {dep.shape}")
        return problems

    h, w = dep.shape
    if h < MIN_MODEL_HW or w < MIN_MODEL_HW:
        problems.append(f"image.data: H and W must be >= {MIN_MODEL_HW}, got {h}x{w}")
    if not np.isfinite(img).all():
        problems.append("image.data: contains non-finite values")
    elif img.min() < 0 or img.max() > 1:
        problems.append("image.data: values must lie in [0, 1]")
    if not np.isfinite(dep).all():
        problems.append("depth.data: contains non-finite values")
        return problems

    if mask.dtype != np.bool_:
        problems.append("depth.valid_mask: dtype must be bool")
        mask = mask.astype(bool)
    if not np.array_equal(mask, dep != 0):
        problems.append("depth.valid_mask: valid_mask must equal the nonzero-depth mask")
    if mask.any() and dep[mask].min() <= 0:
        problems.append("depth.data: depth > 0 on valid pixels violated")
    if not mask.any():
        problems.append("depth.valid_mask: sample has no valid depth pixels")
    return problems


def quantize_depth(depth_m: np.ndarray) -> np.ndarray:
    """Snap depths to the 1/256 m grid used by the 16-bit PNG format."""
    q = np.round(np.asarray(depth_m, dtype=np.float64) * DEPTH_PNG_SCALE) / DEPTH_PNG_SCALE
    return q.astype(np.float32)


def rgb_paths(root: Path | str, split: str, frame_id: str) -> tuple[Path, Path]:
    base = Path(root) / split
    return base / f"{frame_id}.png", base / f"{frame_id}_depth.png"


def save_sample(sample: RgbdSample, root: Path | str, split: str) -> tuple[Path, Path]:
    """Write the RGB/depth PNG pair for a sample, creating directories as needed."""
    rgb_path, depth_path = rgb_paths(root, split, sample.frame_id)
    rgb_path.parent.mkdir(parents=True, exist_ok=True)

    rgb_u8 = np.clip(np.round(sample.image.data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.transpose(rgb_u8, (1, 2, 0))).save(rgb_path)

    depth_u16 = np.round(sample.depth.data.astype(np.float64) * DEPTH_PNG_SCALE)
    if depth_u16.max(initial=0) > 65535:
        raise ValueError(f"{sample.frame_id}: depth exceeds the 16-bit PNG range (> 255.996 m)")
    Image.fromarray(depth_u16.astype(np.uint16)).save(depth_path)
    return rgb_path, depth_path


def load_rgb_png(path: Path | str) -> RgbImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return RgbImage(np.ascontiguousarray(np.transpose(arr, (2, 0, 1))))


def load_depth_png(path: Path | str) -> DepthMap:
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single-channel")
    depth = (raw.astype(np.float64) / DEPTH_PNG_SCALE).astype(np.float32)
    return DepthMap(depth, derive_valid_mask(depth))


def load_sample(root: Path | str, split: str, frame_id: str) -> RgbdSample:
    rgb_path, depth_path = rgb_paths(root, split, frame_id)
    return RgbdSample(load_rgb_png(rgb_path), load_depth_png(depth_path), frame_id)
