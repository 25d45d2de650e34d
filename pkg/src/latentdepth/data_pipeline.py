"""Dataset loading, augmentation, cross-dataset resizing and synthetic scenes.

Augmentation applies geometry (crop, horizontal flip) jointly to image and
depth and photometrics (brightness, contrast, gamma, hue, saturation) to the
image only. All randomness comes from an explicit numpy Generator, so a given
state always reproduces the same output. Neutral parameter values short
circuit their op entirely, which keeps the identity case bit-exact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .core_types import (DepthMap, RgbdSample, RgbImage, derive_valid_mask,
                         load_depth_png, load_rgb_png, quantize_depth,
                         rgb_paths, save_sample)


def to_model_range(x01: np.ndarray) -> np.ndarray:
    """Map [0, 1] RGB to the [-1, 1] range the model consumes."""
    return np.asarray(x01, dtype=np.float32) * 2.0 - 1.0


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_hw: tuple[int, int] | None = None
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    contrast_range: tuple[float, float] = (0.8, 1.25)
    gamma_range: tuple[float, float] = (0.9, 1.1)
    hue_range: tuple[float, float] = (-0.05, 0.05)
    saturation_range: tuple[float, float] = (0.8, 1.25)
    seed: int = 0

    @staticmethod
    def neutral() -> "AugmentConfig":
        return AugmentConfig(flip_prob=0.0, crop_hw=None,
                             brightness_range=(0.0, 0.0), contrast_range=(1.0, 1.0),
                             gamma_range=(1.0, 1.0), hue_range=(0.0, 0.0),
                             saturation_range=(1.0, 1.0))


def _apply_photometrics(img: np.ndarray, brightness: float, contrast: float,
                        gamma: float, hue: float, saturation: float) -> np.ndarray:
    x = img
    if brightness != 0.0:
        x = x + np.float32(brightness)
    if contrast != 1.0:
        mean = x.mean(dtype=np.float64).astype(np.float32)
        x = (x - mean) * np.float32(contrast) + mean
    if gamma != 1.0:
        x = np.clip(x, 0.0, 1.0) ** np.float32(gamma)
    if hue != 0.0 or saturation != 1.0:
        hsv = rgb_to_hsv(np.clip(x, 0.0, 1.0).transpose(1, 2, 0))
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
        x = hsv_to_rgb(hsv).transpose(2, 0, 1)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment(sample: RgbdSample, cfg: AugmentConfig, rng: np.random.Generator) -> RgbdSample:
    """Jointly augment one sample. Deterministic given the generator state."""
    img = sample.image.data
    dep = sample.depth.data
    mask = sample.depth.valid_mask

    do_flip = rng.random() < cfg.flip_prob
    if cfg.crop_hw is not None:
        ch, cw = cfg.crop_hw
        h, w = dep.shape
        if ch > h or cw > w:
            raise ValueError(f"crop {ch}x{cw} larger than sample {h}x{w}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        img = img[:, y0:y0 + ch, x0:x0 + cw]
        dep = dep[y0:y0 + ch, x0:x0 + cw]
        mask = mask[y0:y0 + ch, x0:x0 + cw]
    if do_flip:
        img = img[:, :, ::-1]
        dep = dep[:, ::-1]
        mask = mask[:, ::-1]

    brightness = float(rng.uniform(*cfg.brightness_range))
    contrast = float(rng.uniform(*cfg.contrast_range))
    gamma = float(rng.uniform(*cfg.gamma_range))
    hue = float(rng.uniform(*cfg.hue_range))
    saturation = float(rng.uniform(*cfg.saturation_range))
    img = _apply_photometrics(np.ascontiguousarray(img), brightness, contrast,
                              gamma, hue, saturation)

    return RgbdSample(
        image=RgbImage(img),
        depth=DepthMap(np.ascontiguousarray(dep), np.ascontiguousarray(mask)),
        frame_id=sample.frame_id,
    )


def resize_cross_dataset(sample: RgbdSample, target_hw: tuple[int, int]) -> RgbdSample:
    """Resize to another dataset's geometry: bilinear RGB, nearest depth.

    Nearest-neighbour keeps the sparse depth value set intact and never
    invents depths between a valid reading and the invalid zero. A no-op
    target returns the sample unchanged, bit for bit.
    """
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"invalid target size {th}x{tw}")
    if (th, tw) == (sample.depth.height, sample.depth.width):
        return sample
    rgb = cv2.resize(sample.image.data.transpose(1, 2, 0), (tw, th),
                     interpolation=cv2.INTER_LINEAR)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)
    dep = cv2.resize(sample.depth.data, (tw, th), interpolation=cv2.INTER_NEAREST)
    dep = np.ascontiguousarray(dep, dtype=np.float32)
    return RgbdSample(
        image=RgbImage(np.ascontiguousarray(rgb)),
        depth=DepthMap(dep, derive_valid_mask(dep)),
        frame_id=sample.frame_id,
    )


@dataclass(frozen=True)
class SyntheticSceneSpec:
    n_shapes: int = 4
    depth_range: tuple[float, float] = (4.0, 40.0)
    sparsity: float = 1.0
    seed: int = 0
    height: int = 64
    width: int = 64


def _palette(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    """Depth-correlated colors so appearance predicts depth. (..., 3) output."""
    t = np.clip((depth - near) / max(far - near, 1e-6), 0.0, 1.0)
    r = 0.9 - 0.75 * t
    g = 0.25 + 0.5 * np.abs(0.5 - t)
    b = 0.15 + 0.75 * t
    return np.stack([r, g, b], axis=-1)


def generate_synthetic(spec: SyntheticSceneSpec) -> RgbdSample:
    """Render layered rectangles/ellipses with per-shape constant depth.

    Nearer shapes occlude farther ones. Depths are quantised to the 1/256 m
    PNG grid so samples survive a disk round trip bit-exactly. sparsity is
    the per-pixel probability that a ground-truth reading is retained.
    """
    near, far = spec.depth_range
    if not (0.0 < near < far <= 255.99):
        raise ValueError(f"depth_range must satisfy 0 < near < far <= 255.99, got {spec.depth_range}")
    if not (0.0 <= spec.sparsity <= 1.0):
        raise ValueError(f"sparsity must lie in [0, 1], got {spec.sparsity}")
    if spec.n_shapes < 0:
        raise ValueError("n_shapes must be >= 0")

    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]

    shapes = []
    for _ in range(spec.n_shapes):
        shapes.append({
            "kind": int(rng.integers(0, 2)),
            "cy": float(rng.uniform(0.15, 0.85) * h),
            "cx": float(rng.uniform(0.15, 0.85) * w),
            "hh": float(rng.uniform(0.10, 0.28) * h),
            "hw": float(rng.uniform(0.10, 0.28) * w),
            "depth": float(rng.uniform(near, far)),
            "jitter": rng.uniform(0.9, 1.1, size=3),
        })

    depth = np.full((h, w), far, dtype=np.float64)
    rgb = _palette(depth, near, far)
    # paint far to near so nearer shapes occlude
    for s in sorted(shapes, key=lambda s: -s["depth"]):
        dy, dx = yy - s["cy"], xx - s["cx"]
        if s["kind"] == 0:
            region = (np.abs(dy) <= s["hh"]) & (np.abs(dx) <= s["hw"])
        else:
            region = (dy / s["hh"]) ** 2 + (dx / s["hw"]) ** 2 <= 1.0
        depth[region] = s["depth"]
        rgb[region] = _palette(np.full(int(region.sum()), s["depth"]), near, far) * s["jitter"]

    rgb = rgb + rng.normal(0.0, 0.02, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)

    depth = quantize_depth(depth)
    if spec.sparsity < 1.0:
        keep = rng.random((h, w)) < spec.sparsity
        depth = np.where(keep, depth, np.float32(0.0))
    if not (depth != 0).any():
        raise ValueError("synthetic sample has no valid depth pixels; raise sparsity")

    return RgbdSample(
        image=RgbImage(np.ascontiguousarray(rgb)),
        depth=DepthMap(depth, derive_valid_mask(depth)),
        frame_id=f"synth_{spec.seed:08d}",
    )


@dataclass(frozen=True)
class SampleRef:
    frame_id: str
    rgb_path: Path
    depth_path: Path


@dataclass
class Manifest:
    split: str
    refs: list[SampleRef]
    issues: list[str]


def manifest_path(root: Path | str, split: str) -> Path:
    return Path(root) / split / "manifest.txt"


def load_manifest(root: Path | str, split: str) -> Manifest:
    """Read a split manifest into ordered, deduplicated sample references.

    Duplicates and entries whose PNG files are missing are recorded in
    Manifest.issues; a missing or unreadable manifest file raises.
    """
    path = manifest_path(root, split)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")

    refs: list[SampleRef] = []
    issues: list[str] = []
    seen: set[str] = set()
    for line in text.splitlines():
        frame_id = line.strip()
        if not frame_id:
            continue
        if frame_id in seen:
            issues.append(f"duplicate frame_id '{frame_id}' ignored")
            continue
        seen.add(frame_id)
        rgb_path, depth_path = rgb_paths(root, split, frame_id)
        missing = [p for p in (rgb_path, depth_path) if not p.is_file()]
        if missing:
            issues.append(f"frame_id '{frame_id}': missing file(s) "
                          + ", ".join(str(p) for p in missing))
            continue
        refs.append(SampleRef(frame_id, rgb_path, depth_path))
    return Manifest(split=split, refs=refs, issues=issues)


def load_sample_ref(ref: SampleRef) -> RgbdSample:
    return RgbdSample(load_rgb_png(ref.rgb_path), load_depth_png(ref.depth_path), ref.frame_id)


def synthesize_dataset(root: Path | str, split: str, n: int,
                       base: SyntheticSceneSpec, seed: int) -> list[str]:
    """Write n synthetic samples plus a manifest under root/split."""
    frame_ids = []
    for i in range(n):
        spec = dataclasses.replace(base, seed=seed + i)
        sample = generate_synthetic(spec)
        sample = dataclasses.replace(sample, frame_id=f"{split}_{i:05d}")
        save_sample(sample, root, split)
        frame_ids.append(sample.frame_id)
    path = manifest_path(root, split)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{fid}\n" for fid in frame_ids), encoding="utf-8")
    return frame_ids
