"""Training harness: freeze policy, one-cycle LR, AdamW steps, checkpoints.

Only the dilated-conv and spatial-attention enhancements, the UNet and the
depth decoder receive gradients; the latent encoder and the semantic
backbone/query transformer are frozen and their digests are carried through
checkpoints so any drift is detected on load.

Every source of randomness (timestep/noise draws, data order, augmentation)
lives in two explicit generators that serialize with the train state, which
makes a save/load/continue sequence bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core_types import ModelConfig, RgbdSample
from .data_pipeline import AugmentConfig, augment
from .denoising_unet import diffusion_loss
from .depth_decoder import silog_loss
from .metrics_eval import EvalProtocolConfig, evaluate_split
from .model import FROZEN_GROUPS, TRAINABLE_GROUPS, DepthEstimationModel

CHECKPOINT_FORMAT_VERSION = 1


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or inconsistent with the requested config."""


@dataclass(frozen=True)
class TrainerConfig:
    total_steps: int = 2000
    batch_size: int = 4
    lr_init: float = 4e-5
    lr_max: float = 6e-4
    warmup_fraction: float = 0.3
    lr_final_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    lambda_dm: float = 0.0
    seed: int = 0
    val_every: int = 200


@dataclass(frozen=True)
class OneCycleSchedule:
    lr_init: float = 4e-5
    lr_max: float = 6e-4
    total_steps: int = 2000
    warmup_fraction: float = 0.3
    final_factor: float = 0.1


def lr_at(step: int, sched: OneCycleSchedule) -> float:
    """One-cycle learning rate: cosine ramp to lr_max, cosine decay to the floor.

    Convex-combination form keeps the endpoints exact: lr_at(0) == lr_init,
    lr_at(warmup end) == lr_max, lr_at(total) == lr_init * final_factor.
    """
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if not 0.0 < sched.warmup_fraction < 1.0:
        raise ValueError(f"warmup_fraction must lie in (0, 1), got {sched.warmup_fraction}")
    if not 0.0 < sched.lr_init < sched.lr_max:
        raise ValueError("need 0 < lr_init < lr_max")
    n_warm = max(1, int(round(sched.warmup_fraction * sched.total_steps)))
    if step <= n_warm:
        u = 0.5 * (1.0 - math.cos(math.pi * step / n_warm))
        return (1.0 - u) * sched.lr_init + u * sched.lr_max
    floor = sched.lr_init * sched.final_factor
    progress = (step - n_warm) / max(1, sched.total_steps - n_warm)
    v = 0.5 * (1.0 + math.cos(math.pi * progress))
    return v * sched.lr_max + (1.0 - v) * floor


@dataclass(frozen=True)
class FreezePolicy:
    """Disjoint partition of every model parameter into named groups."""

    frozen: dict[str, list[str]]
    trainable: dict[str, list[str]]

    @property
    def trainable_names(self) -> set[str]:
        return {n for names in self.trainable.values() for n in names}


def make_freeze_policy(model: DepthEstimationModel) -> FreezePolicy:
    groups = model.parameter_groups()
    stray = groups.get("_unassigned", [])
    if stray:
        raise ValueError(f"parameter not covered by the freeze policy: {stray[0]}")
    all_names = [n for n, _ in model.named_parameters()]
    assigned = [n for g in groups.values() for n in g]
    if sorted(assigned) != sorted(all_names):
        raise ValueError("freeze policy does not partition the parameters exactly once")
    return FreezePolicy(
        frozen={g: groups[g] for g in FROZEN_GROUPS},
        trainable={g: groups[g] for g in TRAINABLE_GROUPS},
    )


def build_optimizer(model: DepthEstimationModel, policy: FreezePolicy,
                    cfg: TrainerConfig) -> torch.optim.AdamW:
    """AdamW over trainable parameters only, decoupled weight decay."""
    names = policy.trainable_names
    params = [p for n, p in model.named_parameters() if n in names]
    return torch.optim.AdamW(params, lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


@dataclass
class LossRecord:
    step: int
    lr: float
    depth_loss: float
    diffusion_loss: float
    total: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainState:
    model: DepthEstimationModel
    optimizer: torch.optim.AdamW
    schedule: OneCycleSchedule
    trainer_config: TrainerConfig
    torch_gen: torch.Generator
    np_rng: np.random.Generator
    frozen_digests: dict[str, str]
    step: int = 0
    epoch: int = 0
    epoch_order: list[int] = field(default_factory=list)
    epoch_pos: int = 0
    best_abs_rel: float = math.inf


def init_train_state(model: DepthEstimationModel, cfg: TrainerConfig) -> TrainState:
    policy = make_freeze_policy(model)
    schedule = OneCycleSchedule(
        lr_init=cfg.lr_init, lr_max=cfg.lr_max, total_steps=cfg.total_steps,
        warmup_fraction=cfg.warmup_fraction, final_factor=cfg.lr_final_factor)
    return TrainState(
        model=model,
        optimizer=build_optimizer(model, policy, cfg),
        schedule=schedule,
        trainer_config=cfg,
        torch_gen=torch.Generator().manual_seed(cfg.seed),
        np_rng=np.random.default_rng(cfg.seed),
        frozen_digests=model.group_digests(FROZEN_GROUPS),
    )


def _stack_batch(batch: list[RgbdSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.image.data for s in batch]))
    gt = torch.from_numpy(np.stack([s.depth.data for s in batch]))
    valid = torch.from_numpy(np.stack([s.depth.valid_mask for s in batch]))
    return x, gt, valid


def train_step(state: TrainState, batch: list[RgbdSample]) -> LossRecord:
    """One optimizer step on a batch. Deterministic given the state."""
    if not batch:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    model, cfg = state.model, state.trainer_config
    x, gt, valid = _stack_batch(batch)

    lr = lr_at(min(state.step, state.schedule.total_steps), state.schedule)
    for g in state.optimizer.param_groups:
        g["lr"] = lr

    if cfg.lambda_dm > 0:
        b = x.shape[0]
        f = model.config.latent_downsample
        t = torch.randint(0, model.config.diffusion_T, (b,), generator=state.torch_gen)
        eps = torch.randn((b, model.config.latent_channels,
                           x.shape[-2] // f, x.shape[-1] // f), generator=state.torch_gen)
        depth_pred, eps_pred = model.compute(x, t, eps)
        dm_loss = diffusion_loss(eps, eps_pred)
    else:
        depth_pred, _ = model.compute(x)
        dm_loss = torch.zeros(())

    d_loss = torch.stack([
        silog_loss(depth_pred[i], gt[i], valid[i]) for i in range(len(batch))
    ]).mean()
    total = d_loss + cfg.lambda_dm * dm_loss

    if not torch.isfinite(total):
        frames = ", ".join(s.frame_id for s in batch)
        raise NumericError(f"non-finite loss at step {state.step} on frames [{frames}]")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    trainable = [p for grp in state.optimizer.param_groups for p in grp["params"]]
    torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
    state.optimizer.step()
    state.step += 1

    return LossRecord(
        step=state.step, lr=lr,
        depth_loss=float(d_loss.detach()),
        diffusion_loss=float(dm_loss.detach()),
        total=float(total.detach()),
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )


def save_checkpoint(state: TrainState, path: Path | str) -> Path:
    """Atomic single-file snapshot: write to a temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(state.model.config),
        "trainer_config": asdict(state.trainer_config),
        "schedule": asdict(state.schedule),
        "model_seed": state.model.seed,
        "step": state.step,
        "epoch": state.epoch,
        "epoch_order": list(state.epoch_order),
        "epoch_pos": state.epoch_pos,
        "best_abs_rel": state.best_abs_rel,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "torch_gen_state": state.torch_gen.get_state(),
        "np_rng_state": state.np_rng.bit_generator.state,
        "frozen_digests": dict(state.frozen_digests),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path | str, expected_config: ModelConfig | None = None) -> TrainState:
    """Rebuild a TrainState bit-exactly from a checkpoint file.

    Refuses to run when the stored frozen-weight digests do not match the
    loaded parameters, or when expected_config disagrees with the stored
    config (the error names the first mismatching field).
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable or truncated checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {payload.get('format_version')} in {path}")

    stored_cfg = ModelConfig(**payload["model_config"])
    if expected_config is not None:
        for f in dataclasses.fields(ModelConfig):
            a, b = getattr(stored_cfg, f.name), getattr(expected_config, f.name)
            if a != b:
                raise CheckpointError(
                    f"config mismatch on field '{f.name}': checkpoint has {a!r}, requested {b!r}")

    cfg = TrainerConfig(**payload["trainer_config"])
    model = DepthEstimationModel(stored_cfg, seed=payload["model_seed"])
    model.load_state_dict(payload["model_state"])

    digests = model.group_digests(FROZEN_GROUPS)
    for group, stored in payload["frozen_digests"].items():
        if digests.get(group) != stored:
            raise CheckpointError(
                f"frozen weight digest mismatch for group '{group}' in {path}; refusing to run")

    policy = make_freeze_policy(model)
    optimizer = build_optimizer(model, policy, cfg)
    optimizer.load_state_dict(payload["optimizer_state"])
    torch_gen = torch.Generator()
    torch_gen.set_state(payload["torch_gen_state"])
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = payload["np_rng_state"]

    return TrainState(
        model=model, optimizer=optimizer,
        schedule=OneCycleSchedule(**payload["schedule"]),
        trainer_config=cfg,
        torch_gen=torch_gen, np_rng=np_rng,
        frozen_digests=dict(payload["frozen_digests"]),
        step=payload["step"], epoch=payload["epoch"],
        epoch_order=list(payload["epoch_order"]), epoch_pos=payload["epoch_pos"],
        best_abs_rel=payload["best_abs_rel"],
    )


def fit(state: TrainState, train_samples: list[RgbdSample],
        val_samples: list[RgbdSample] | None = None,
        out_dir: Path | str | None = None,
        augment_cfg: AugmentConfig | None = None,
        eval_cfg: EvalProtocolConfig | None = None,
        log_path: Path | str | None = None) -> list[LossRecord]:
    """Run training to total_steps, logging and checkpointing along the way.

    Writes final.pt always and best.pt whenever validation abs_rel improves.
    The shuffled epoch order lives in the state, so a resumed run consumes
    batches in exactly the order the uninterrupted run would have.
    """
    if not train_samples:
        raise ValueError("no training samples")
    cfg = state.trainer_config
    out_dir = Path(out_dir) if out_dir is not None else None
    if eval_cfg is None:
        eval_cfg = EvalProtocolConfig(use_garg_crop=False, flip_augment=False,
                                      use_split_fuse=False)
    log_file = None
    if log_path is not None or out_dir is not None:
        log_file = Path(log_path) if log_path is not None else out_dir / "train_log.jsonl"
        log_file.parent.mkdir(parents=True, exist_ok=True)

    records = []
    while state.step < cfg.total_steps:
        if state.epoch_pos >= len(state.epoch_order):
            state.epoch_order = state.np_rng.permutation(len(train_samples)).tolist()
            state.epoch_pos = 0
            state.epoch += 1
        take = min(cfg.batch_size, len(state.epoch_order) - state.epoch_pos)
        idx = state.epoch_order[state.epoch_pos:state.epoch_pos + take]
        state.epoch_pos += take
        batch = [train_samples[i] for i in idx]
        if augment_cfg is not None:
            batch = [augment(s, augment_cfg, state.np_rng) for s in batch]

        rec = train_step(state, batch)
        records.append(rec)
        if log_file is not None:
            with open(log_file, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")

        at_end = state.step >= cfg.total_steps
        if val_samples and (state.step % cfg.val_every == 0 or at_end):
            report = evaluate_split(state.model, val_samples, eval_cfg,
                                    min_depth=state.model.config.min_depth)
            if report.abs_rel < state.best_abs_rel:
                state.best_abs_rel = report.abs_rel
                if out_dir is not None:
                    save_checkpoint(state, out_dir / "best.pt")
    if out_dir is not None:
        save_checkpoint(state, out_dir / "final.pt")
        if not val_samples:
            save_checkpoint(state, out_dir / "best.pt")
    return records
