"""Command-line entry point: synth, train, eval, predict, metrics.

Exit codes: 0 on success, 2 for usage/config/data problems, 3 for numeric
failures during training or evaluation. Every error path prints a single
stderr line of the form "error[kind]: reason" before exiting.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .core_types import DEPTH_PNG_SCALE, load_rgb_png
from .data_pipeline import load_manifest, load_sample_ref, synthesize_dataset
from .metrics_eval import (EvalProtocolConfig, MetricsReport, evaluate_split,
                           format_report_table, load_report, predict_depth,
                           save_report)
from .model import DepthEstimationModel
from .trainer import (CheckpointError, NumericError, TrainerConfig,
                      init_train_state, fit, load_checkpoint, save_checkpoint)

ABLATION_TAGS = ("base", "dc", "sa", "dc_sa")
VAL_SEED_OFFSET = 100_000


def _fail(kind: str, message: str) -> None:
    line = " ".join(str(message).split())
    print(f"error[{kind}]: {line}", file=sys.stderr)


def _common_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", type=str, default=None, help="output directory")


def _load_run(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_run_config(args.config, overrides)


def _ablation_model_config(base, tag: str):
    if tag not in ABLATION_TAGS:
        raise ConfigError(f"unknown ablation tag '{tag}'")
    return replace(base, use_dilated_conv=tag in ("dc", "dc_sa"),
                   use_spatial_attention=tag in ("sa", "dc_sa"))


def _load_split(root: str | Path, split: str):
    manifest = load_manifest(root, split)
    for issue in manifest.issues:
        print(f"warning[{split}]: {issue}", file=sys.stderr)
    samples = [load_sample_ref(ref) for ref in manifest.refs]
    return samples


def cmd_synth(args) -> int:
    run = _load_run(args)
    root = Path(args.out or run.data_root)
    train_ids = synthesize_dataset(root, "train", args.n_train, run.synth, run.seed)
    val_ids = synthesize_dataset(root, "val", args.n_val, run.synth, run.seed + VAL_SEED_OFFSET)
    print(f"wrote {len(train_ids)} train and {len(val_ids)} val samples under {root}")
    return 0


def _train_one(run: RunConfig, model_cfg, out_dir: Path, resume: str | None,
               train_samples, val_samples) -> Path:
    tcfg = replace(run.trainer, seed=run.seed)
    if resume:
        state = load_checkpoint(resume, expected_config=model_cfg)
    else:
        model = DepthEstimationModel(model_cfg, seed=run.seed)
        state = init_train_state(model, tcfg)
    eval_cfg = replace(run.eval_protocol, use_split_fuse=False, flip_augment=False)
    fit(state, train_samples, val_samples, out_dir=out_dir,
        augment_cfg=run.augment, eval_cfg=eval_cfg)
    return out_dir / "final.pt"


def cmd_train(args) -> int:
    run = _load_run(args)
    out_root = Path(args.out or run.out_dir)
    train_samples = _load_split(run.data_root, "train")
    if not train_samples:
        raise ConfigError(f"no usable training samples in manifest "
                          f"{Path(run.data_root) / 'train' / 'manifest.txt'}")
    try:
        val_samples = _load_split(run.data_root, "val")
    except FileNotFoundError:
        val_samples = []

    if args.ablation == "all":
        for tag in ABLATION_TAGS:
            cfg = _ablation_model_config(run.model, tag)
            final = _train_one(run, cfg, out_root / tag, None, train_samples, val_samples)
            print(f"[{tag}] trained {run.trainer.total_steps} steps -> {final}")
    else:
        cfg = run.model if args.ablation is None \
            else _ablation_model_config(run.model, args.ablation)
        final = _train_one(run, cfg, out_root, args.resume, train_samples, val_samples)
        print(f"trained {run.trainer.total_steps} steps -> {final}")
    return 0


def _eval_protocol(run: RunConfig, args) -> EvalProtocolConfig:
    cfg = run.eval_protocol
    if args.fuse:
        cfg = replace(cfg, use_split_fuse=True)
    if args.garg_crop is not None:
        cfg = replace(cfg, use_garg_crop=args.garg_crop)
    return cfg


def _evaluate_checkpoint(ckpt: Path, samples, eval_cfg) -> MetricsReport:
    state = load_checkpoint(ckpt)
    model = state.model
    model.eval()
    return evaluate_split(model, samples, eval_cfg, min_depth=model.config.min_depth)


def cmd_eval(args) -> int:
    run = _load_run(args)
    out_dir = Path(args.out or run.out_dir)
    samples = _load_split(run.data_root, args.split)
    if not samples:
        raise ConfigError(f"no usable samples in split '{args.split}'")
    eval_cfg = _eval_protocol(run, args)

    if args.ablation == "all":
        ckpt_root = Path(args.ckpt)
        for tag in ABLATION_TAGS:
            ckpt = ckpt_root / tag / "best.pt"
            if not ckpt.is_file():
                ckpt = ckpt_root / tag / "final.pt"
            report = _evaluate_checkpoint(ckpt, samples, eval_cfg)
            save_report(report, out_dir / tag)
            print(f"[{tag}]")
            print(format_report_table(report))
    else:
        report = _evaluate_checkpoint(Path(args.ckpt), samples, eval_cfg)
        save_report(report, out_dir / "report")
        print(format_report_table(report))
    return 0


def _write_depth_outputs(depth: np.ndarray, out_path: Path, min_depth: float,
                         max_depth: float) -> Path:
    from PIL import Image

    out_path.parent.mkdir(parents=True, exist_ok=True)
    depth_u16 = np.clip(np.round(depth.astype(np.float64) * DEPTH_PNG_SCALE), 0, 65535)
    Image.fromarray(depth_u16.astype(np.uint16)).save(out_path)

    # preview on a fixed scale so images are comparable across frames
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import cm

    norm = np.clip((depth - min_depth) / (max_depth - min_depth), 0.0, 1.0)
    rgba = cm.viridis(norm)
    preview = (rgba[..., :3] * 255.0).round().astype(np.uint8)
    preview_path = out_path.with_name(out_path.stem + "_preview.png")
    Image.fromarray(preview).save(preview_path)
    return preview_path


def cmd_predict(args) -> int:
    run = _load_run(args)
    state = load_checkpoint(Path(args.ckpt))
    model = state.model
    model.eval()
    image = load_rgb_png(args.image)
    eval_cfg = _eval_protocol(run, args)
    if args.fuse:
        depth = predict_depth(model, image, replace(eval_cfg, use_split_fuse=True))
    else:
        depth = model.predict(image)
    out_path = Path(args.out or run.out_dir) / (Path(args.image).stem + "_depth.png")
    preview = _write_depth_outputs(depth, out_path, model.config.min_depth,
                                   model.config.max_depth)
    print(f"wrote {out_path} and {preview}")
    return 0


def _plot_training_curve(log_path: Path, out_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = [json.loads(line) for line in log_path.read_text(encoding="utf-8").splitlines()
               if line.strip()]
    if not records:
        raise ConfigError(f"training log {log_path} is empty")
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(steps, [r["total"] for r in records], label="total", lw=1.2)
    ax.plot(steps, [r["depth_loss"] for r in records], label="depth", lw=0.9, alpha=0.8)
    if any(r["diffusion_loss"] != 0.0 for r in records):
        ax.plot(steps, [r["diffusion_loss"] for r in records], label="diffusion",
                lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(steps, [r["lr"] for r in records], color="gray", ls="--", lw=0.8, label="lr")
    ax2.set_ylabel("learning rate")
    ax.legend(loc="upper right")
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def cmd_metrics(args) -> int:
    did_something = False
    if args.report:
        report = load_report(Path(args.report))
        print(format_report_table(report))
        did_something = True
    if args.log:
        out = Path(args.out or ".") / "training_curve.png"
        _plot_training_curve(Path(args.log), out)
        print(f"wrote {out}")
        did_something = True
    if not did_something:
        raise ConfigError("metrics needs --report and/or --log")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentdepth",
        description="Latent-diffusion monocular depth estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    _common_options(p)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the depth model")
    _common_options(p)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    p.add_argument("--ablation", choices=ABLATION_TAGS + ("all",), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common_options(p)
    p.add_argument("--ckpt", type=str, required=True,
                   help="checkpoint file, or a directory for --ablation all")
    p.add_argument("--split", type=str, default="val")
    p.add_argument("--fuse", action="store_true", help="enable split-flip-fuse prediction")
    p.add_argument("--garg-crop", dest="garg_crop", action="store_true", default=None)
    p.add_argument("--no-garg-crop", dest="garg_crop", action="store_false")
    p.add_argument("--ablation", choices=ABLATION_TAGS + ("all",), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict depth for one image")
    _common_options(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--fuse", action="store_true")
    p.add_argument("--garg-crop", dest="garg_crop", action="store_true", default=None)
    p.add_argument("--no-garg-crop", dest="garg_crop", action="store_false")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", help="render a report table or a training curve")
    _common_options(p)
    p.add_argument("--report", type=str, default=None, help="report .json to print")
    p.add_argument("--log", type=str, default=None, help="train_log.jsonl to plot")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail("config", exc)
        return 2
    except CheckpointError as exc:
        _fail("checkpoint", exc)
        return 2
    except FileNotFoundError as exc:
        _fail("io", exc)
        return 2
    except NumericError as exc:
        _fail("numeric", exc)
        return 3
    except ValueError as exc:
        _fail("invalid", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
