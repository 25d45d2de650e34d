"""Depth metrics and the evaluation protocol.

Metrics follow the standard monocular-depth definitions: threshold accuracies
delta_k = mean(max(gt/pred, pred/gt) < 1.25^k) with strict inequality, Abs
Rel, Sq Rel and RMSE, computed in float64 over masked pixels only.
Evaluation masks combine the validity mask, an optional Garg crop and a depth
cap; predictions are clamped to [min_depth, depth_cap] first. Reports
aggregate per-sample metric values by averaging.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .core_types import RgbdSample, RgbImage

log = logging.getLogger(__name__)

GARG_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)

REPORT_FIELDS = ("delta1", "delta2", "delta3", "rmse", "abs_rel", "sq_rel",
                 "n_valid", "n_samples")
TABLE_ORDER = ("delta1", "delta2", "delta3", "rmse", "abs_rel", "sq_rel")


@dataclass(frozen=True)
class MetricsReport:
    delta1: float
    delta2: float
    delta3: float
    rmse: float
    abs_rel: float
    sq_rel: float
    n_valid: int
    n_samples: int


@dataclass(frozen=True)
class EvalProtocolConfig:
    use_garg_crop: bool = True
    depth_cap: float = 80.0
    split_overlap: float = 0.2
    flip_augment: bool = True
    use_split_fuse: bool = False


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                    min_depth: float = 1e-3, depth_cap: float = 80.0) -> MetricsReport:
    """Six standard metrics over the masked pixels of one sample."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    mask = np.asarray(mask).astype(bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("metrics undefined: mask selects no pixels")
    p = np.clip(pred[mask].astype(np.float64), min_depth, depth_cap)
    g = gt[mask].astype(np.float64)
    if (g <= 0).any():
        raise ValueError("ground truth must be positive on masked pixels")

    ratio = np.maximum(g / p, p / g)
    diff = g - p
    return MetricsReport(
        delta1=float((ratio < 1.25).mean()),
        delta2=float((ratio < 1.25 ** 2).mean()),
        delta3=float((ratio < 1.25 ** 3).mean()),
        rmse=float(np.sqrt((diff ** 2).mean())),
        abs_rel=float((np.abs(diff) / g).mean()),
        sq_rel=float(((diff ** 2) / g).mean()),
        n_valid=n,
        n_samples=1,
    )


def garg_crop_mask(h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask of the Garg evaluation crop, floor index arithmetic."""
    if h < 1 or w < 1:
        raise ValueError(f"degenerate image size {h}x{w}")
    y0, y1 = int(math.floor(GARG_CROP[0] * h)), int(math.floor(GARG_CROP[1] * h))
    x0, x1 = int(math.floor(GARG_CROP[2] * w)), int(math.floor(GARG_CROP[3] * w))
    if y0 >= y1 or x0 >= x1:
        raise ValueError(f"image {h}x{w} too small for the crop")
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


def _pad_to_multiple(data: np.ndarray, multiple: int) -> np.ndarray:
    if multiple <= 1:
        return data
    _, h, w = data.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return data
    return np.pad(data, ((0, 0), (0, ph), (0, pw)), mode="edge")


def split_flip_fuse_predict(predict_fn: Callable[[RgbImage], np.ndarray], image: RgbImage,
                            cfg: EvalProtocolConfig, pad_multiple: int = 1) -> np.ndarray:
    """Predict on overlapping left/right halves, flip-average, stitch.

    Each segment of width ceil(W * (1 + overlap) / 2) is padded to the model
    stride, predicted as-is and mirrored, and the two predictions averaged.
    The overlap region is blended with a linear ramp from left-weight 1 to 0.
    The fused map has exactly the input width.
    """
    if not (0.0 <= cfg.split_overlap <= 1.0):
        raise ValueError(f"split_overlap must lie in [0, 1], got {cfg.split_overlap}")
    data = image.data
    h, w = data.shape[1], data.shape[2]
    if w < 2:
        raise ValueError(f"image width {w} too small to split")
    seg_w = math.ceil(w * (1.0 + cfg.split_overlap) / 2.0)
    if seg_w >= w:
        raise ValueError(f"split_overlap {cfg.split_overlap} too large for width {w}")

    def predict_segment(seg: np.ndarray) -> np.ndarray:
        def run(x: np.ndarray) -> np.ndarray:
            padded = _pad_to_multiple(x, pad_multiple)
            out = np.asarray(predict_fn(RgbImage(np.ascontiguousarray(padded))))
            return out[:h, :seg_w]

        d = run(seg)
        if cfg.flip_augment:
            d_flip = run(seg[:, :, ::-1])[:, ::-1]
            d = 0.5 * (d + d_flip)
        return d.astype(np.float64)

    d_left = predict_segment(data[:, :, :seg_w])
    d_right = predict_segment(data[:, :, w - seg_w:])

    out = np.zeros((h, w), dtype=np.float64)
    n_ov = 2 * seg_w - w
    left_only = w - seg_w
    out[:, :left_only] = d_left[:, :left_only]
    out[:, seg_w:] = d_right[:, n_ov:]
    if n_ov > 0:
        # interior points of the ramp, so no duplicated pure-left/right column
        wl = np.linspace(1.0, 0.0, n_ov + 2)[1:-1]
        out[:, left_only:seg_w] = wl * d_left[:, left_only:] + (1.0 - wl) * d_right[:, :n_ov]
    return out.astype(np.float32)


def predict_depth(predictor, image: RgbImage, cfg: EvalProtocolConfig) -> np.ndarray:
    """Run a predictor under the evaluation protocol settings."""
    pad_multiple = int(getattr(predictor, "pad_multiple", 1))
    if cfg.use_split_fuse:
        return split_flip_fuse_predict(predictor.predict, image, cfg, pad_multiple)
    d = np.asarray(predictor.predict(image), dtype=np.float64)
    if cfg.flip_augment:
        flipped = RgbImage(np.ascontiguousarray(image.data[:, :, ::-1]))
        d = 0.5 * (d + np.asarray(predictor.predict(flipped), dtype=np.float64)[:, ::-1])
    return d.astype(np.float32)


def evaluate_split(predictor, samples: Iterable[RgbdSample], cfg: EvalProtocolConfig,
                   min_depth: float = 1e-3) -> MetricsReport:
    """Evaluate a predictor over samples, averaging per-sample metrics.

    The per-sample mask is valid & (gt <= depth_cap) & garg crop (when
    enabled). Samples whose mask comes out empty are logged and excluded
    rather than failing the whole run.
    """
    per_sample: list[MetricsReport] = []
    n_valid = 0
    for sample in samples:
        gt = sample.depth.data
        mask = sample.depth.valid_mask & (gt <= cfg.depth_cap)
        if cfg.use_garg_crop:
            mask = mask & garg_crop_mask(*gt.shape)
        if not mask.any():
            log.warning("sample %s: empty evaluation mask, excluded", sample.frame_id)
            continue
        pred = predict_depth(predictor, sample.image, cfg)
        r = compute_metrics(pred, gt, mask, min_depth=min_depth, depth_cap=cfg.depth_cap)
        per_sample.append(r)
        n_valid += r.n_valid
    if not per_sample:
        raise ValueError("no sample produced a non-empty evaluation mask")

    def mean(field: str) -> float:
        return float(np.mean([getattr(r, field) for r in per_sample]))

    return MetricsReport(
        delta1=mean("delta1"), delta2=mean("delta2"), delta3=mean("delta3"),
        rmse=mean("rmse"), abs_rel=mean("abs_rel"), sq_rel=mean("sq_rel"),
        n_valid=n_valid, n_samples=len(per_sample),
    )


def report_to_dict(report: MetricsReport) -> dict:
    return asdict(report)


def report_from_dict(d: dict) -> MetricsReport:
    return MetricsReport(**{k: d[k] for k in REPORT_FIELDS})


def format_report_table(report: MetricsReport) -> str:
    header = "  ".join(f"{name:>8s}" for name in TABLE_ORDER)
    values = "  ".join(f"{getattr(report, name):8.4f}" for name in TABLE_ORDER)
    return header + "\n" + values


def save_report(report: MetricsReport, base_path: Path | str) -> tuple[Path, Path]:
    """Write <base>.json (structured) and <base>.txt (flat key-value lines)."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_suffix(".json")
    txt_path = base.with_suffix(".txt")
    json_path.write_text(json.dumps(report_to_dict(report), indent=2) + "\n", encoding="utf-8")
    txt_path.write_text(
        "".join(f"{k} {getattr(report, k)}\n" for k in REPORT_FIELDS), encoding="utf-8")
    return json_path, txt_path


def load_report(json_path: Path | str) -> MetricsReport:
    return report_from_dict(json.loads(Path(json_path).read_text(encoding="utf-8")))
