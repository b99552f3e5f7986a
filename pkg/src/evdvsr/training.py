"""Losses, augmentation, the optimization loop, and checkpointing."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from evdvsr.config import Config, ModelConfig, TrainConfig, model_config_hash
from evdvsr.data import ClipDataset, batch_to_tensors
from evdvsr.errors import (DataError, InvalidInputError,
                           TrainingDivergenceError)
from evdvsr.events import SequenceSample, VoxelGrid
from evdvsr.model import EvDeblurVSR

CHECKPOINT_FORMAT = "evdvsr-checkpoint-1"
ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-8

LOG_HEADER = "iter, lr, L_r, L_e, L_total, wall_ms"


@dataclass
class LossBreakdown:
    l_r: float
    l_e: float

    @property
    def total(self) -> float:
        return self.l_r + self.l_e


def loss_r(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all frames, channels, and pixels."""
    if pred.shape != gt.shape:
        raise InvalidInputError("loss_r needs equal shapes")
    return torch.mean((pred - gt) ** 2)


def loss_e(pred: torch.Tensor, gt: torch.Tensor, masks: torch.Tensor,
           eta: float = 1e-8) -> torch.Tensor:
    """Edge-enhanced loss: mask-weighted per-pixel Charbonnier penalty.

    The penalty sqrt(diff^2 + eta^2) is taken per pixel per channel, weighted
    elementwise by the event-derived mask, averaged over pixels and channels
    per frame, then averaged over frames (and batch). That keeps it on the
    same per-pixel-mean footing as the MSE term, so the two add without an
    extra balancing weight.
    """
    if pred.shape != gt.shape or masks.shape != pred.shape:
        raise InvalidInputError("loss_e needs matching pred/gt/mask shapes")
    if masks.min() < 0 or masks.max() > 1:
        raise InvalidInputError("edge masks must lie in [0, 1]")
    penalty = torch.sqrt((pred - gt) ** 2 + eta * eta)
    return torch.mean(masks * penalty)


def compute_losses(pred, gt, masks, train_cfg: TrainConfig):
    zero = pred.new_zeros(())
    lr_term = loss_r(pred, gt) if train_cfg.use_lr else zero
    le_term = loss_e(pred, gt, masks, train_cfg.eta) if train_cfg.use_le \
        else zero
    return lr_term, le_term


def cosine_lr(iteration: int, cfg: TrainConfig) -> float:
    """Cosine annealing from base_lr at iteration 0 to lr_min at total_iters."""
    if cfg.total_iters <= 0:
        return cfg.base_lr
    k = min(max(iteration, 0), cfg.total_iters)
    cos = math.cos(math.pi * k / cfg.total_iters)
    return cfg.lr_min + (cfg.base_lr - cfg.lr_min) * (1.0 + cos) / 2.0


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.base_lr,
                            betas=ADAM_BETAS, eps=ADAM_EPS)


def train_step(model: EvDeblurVSR, batch: dict, optimizer, iteration: int,
               cfg: TrainConfig) -> LossBreakdown:
    """One optimization step; returns the losses measured before the update."""
    lr = cosine_lr(iteration, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    pred = model(batch["frames"], batch["intra"], batch["fwd"], batch["bwd"])
    lr_term, le_term = compute_losses(pred, batch["gt"], batch["masks"], cfg)
    total = lr_term + le_term
    if not torch.isfinite(total):
        raise TrainingDivergenceError(iteration)
    total.backward()
    optimizer.step()
    return LossBreakdown(float(lr_term.detach()), float(le_term.detach()))


def augment(sample: SequenceSample, rng: np.random.Generator,
            crop_size: int | None = None, flip_prob_h: float = 0.5,
            flip_prob_v: float = 0.5, center_crop: bool = False,
            ) -> SequenceSample:
    """Random crop plus horizontal/vertical flips, applied consistently.

    The crop window is chosen on the LR grid and scaled by ``scale`` for HR
    tensors; flips touch only spatial axes (voxel bins and polarities are
    left alone). Four uniform draws are consumed regardless of configuration,
    keeping downstream randomness aligned across settings.
    """
    u_y, u_x, u_h, u_v = rng.random(4)
    s = sample.scale
    t, _, h, w = sample.blurry_lr.shape

    lr = sample.blurry_lr
    intra = np.stack([v.data for v in sample.intra_voxels])
    fwd = np.stack([v.data for v in sample.fwd_voxels]) if sample.fwd_voxels \
        else np.zeros((0, intra.shape[1], h, w), intra.dtype)
    bwd = np.stack([v.data for v in sample.bwd_voxels]) if sample.bwd_voxels \
        else np.zeros_like(fwd)
    hr = sample.sharp_hr
    masks = sample.edge_masks

    if crop_size is not None and (crop_size > h or crop_size > w):
        raise InvalidInputError("crop_size larger than the frame")
    if crop_size is not None and (crop_size < h or crop_size < w):
        if center_crop:
            y0, x0 = (h - crop_size) // 2, (w - crop_size) // 2
        else:
            y0 = int(u_y * (h - crop_size + 1))
            x0 = int(u_x * (w - crop_size + 1))
        ys, xs = slice(y0, y0 + crop_size), slice(x0, x0 + crop_size)
        ys_hr = slice(y0 * s, (y0 + crop_size) * s)
        xs_hr = slice(x0 * s, (x0 + crop_size) * s)
        lr, intra = lr[..., ys, xs], intra[..., ys, xs]
        fwd, bwd = fwd[..., ys, xs], bwd[..., ys, xs]
        if hr is not None:
            hr = hr[..., ys_hr, xs_hr]
        if masks is not None:
            masks = masks[..., ys_hr, xs_hr]

    flips = []
    if u_h < flip_prob_h:
        flips.append(-1)
    if u_v < flip_prob_v:
        flips.append(-2)
    if flips:
        flip = lambda a: np.ascontiguousarray(np.flip(a, axis=flips))
        lr, intra, fwd, bwd = flip(lr), flip(intra), flip(fwd), flip(bwd)
        hr = flip(hr) if hr is not None else None
        masks = flip(masks) if masks is not None else None

    def grids(arr, src):
        return [VoxelGrid(np.ascontiguousarray(a), g.kind, g.window)
                for a, g in zip(arr, src)]

    return SequenceSample(
        blurry_lr=np.ascontiguousarray(lr),
        intra_voxels=grids(intra, sample.intra_voxels),
        fwd_voxels=grids(fwd, sample.fwd_voxels),
        bwd_voxels=grids(bwd, sample.bwd_voxels),
        scale=s,
        sharp_hr=np.ascontiguousarray(hr) if hr is not None else None,
        edge_masks=np.ascontiguousarray(masks) if masks is not None else None,
    )


def sample_training_batch(dataset: ClipDataset, rng: np.random.Generator,
                          cfg: TrainConfig) -> dict:
    samples = []
    for _ in range(cfg.batch_size):
        cache = dataset.train[int(rng.integers(len(dataset.train)))]
        t_len = min(cfg.clip_length, cache.num_frames)
        t0 = int(rng.integers(cache.num_frames - t_len + 1))
        sample = cache.window(t0, t_len)
        samples.append(augment(sample, rng, cfg.crop_size, cfg.flip_prob_h,
                               cfg.flip_prob_v, cfg.center_crop))
    return batch_to_tensors(samples)


def save_checkpoint(path: str | Path, model: EvDeblurVSR, optimizer,
                    iteration: int, rng: np.random.Generator,
                    train_cfg: TrainConfig) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": dataclasses.asdict(model.config),
        "model_config_hash": model_config_hash(model.config),
        "train_config": dataclasses.asdict(train_cfg),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": int(iteration),
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    """Load and integrity-check a checkpoint archive."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unknown checkpoint format "
                        f"{payload.get('format_version')!r}")
    mc = ModelConfig(**payload["model_config"])
    if model_config_hash(mc) != payload["model_config_hash"]:
        raise DataError(f"{path}: model config hash mismatch "
                        "(corrupt or tampered checkpoint)")
    return payload


def model_from_checkpoint(payload: dict) -> EvDeblurVSR:
    model = EvDeblurVSR(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model


def validation_psnr(model: EvDeblurVSR, caches, max_frames: int = 20) -> float:
    """Mean PSNR over validation clips (full frames, no cropping)."""
    from evdvsr.metrics import psnr
    if not caches:
        return float("nan")
    vals = []
    with torch.no_grad():
        for cache in caches:
            t = min(cache.num_frames, max_frames)
            sample = cache.window(0, t)
            pred = model.forward_sample(sample)
            vals.append(psnr(np.clip(pred, 0.0, 1.0), sample.sharp_hr))
    return float(np.mean(vals))


def fit(model: EvDeblurVSR, dataset: ClipDataset, train_cfg: TrainConfig,
        out_dir: str | Path, resume_from: str | Path | None = None) -> Path:
    """Run the optimization loop; returns the path of the final checkpoint.

    Deterministic under a fixed seed and fixed threading: all data-order and
    augmentation randomness flows from one generator whose state rides along
    in every checkpoint, so a resumed run continues the exact stream.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    start_iter = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["model_config_hash"] != model_config_hash(model.config):
            raise DataError("checkpoint was trained with a different model "
                            "config")
        model.load_state_dict(payload["state_dict"])
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        if payload["rng_state"] is not None:
            rng.bit_generator.state = payload["rng_state"]
        start_iter = payload["iteration"]

    log_path = out_dir / "train.log"
    val_path = out_dir / "val.log"
    mode = "a" if start_iter else "w"
    latest = out_dir / "checkpoint_latest.pt"

    def write_ckpt(iteration):
        numbered = out_dir / f"checkpoint_{iteration:07d}.pt"
        save_checkpoint(numbered, model, optimizer, iteration, rng, train_cfg)
        save_checkpoint(latest, model, optimizer, iteration, rng, train_cfg)
        return numbered

    with open(log_path, mode, encoding="utf-8") as log, \
            open(val_path, mode, encoding="utf-8") as vlog:
        if not start_iter:
            log.write(f"# {LOG_HEADER}\n")
            vlog.write("# iter, psnr\n")
        if train_cfg.total_iters == 0:
            return write_ckpt(0)
        last = None
        for it in range(start_iter, train_cfg.total_iters):
            t0 = time.monotonic()
            batch = sample_training_batch(dataset, rng, train_cfg)
            losses = train_step(model, batch, optimizer, it, train_cfg)
            wall_ms = (time.monotonic() - t0) * 1000.0
            done = it + 1
            if done % train_cfg.log_every == 0 or done == train_cfg.total_iters:
                log.write(f"{done}, {cosine_lr(it, train_cfg):.8e}, "
                          f"{losses.l_r:.8e}, {losses.l_e:.8e}, "
                          f"{losses.total:.8e}, {wall_ms:.1f}\n")
                log.flush()
            if train_cfg.val_every and done % train_cfg.val_every == 0 \
                    and dataset.val:
                vpsnr = validation_psnr(model, dataset.val)
                vlog.write(f"{done}, {vpsnr:.4f}\n")
                vlog.flush()
            if done % train_cfg.ckpt_every == 0 \
                    or done == train_cfg.total_iters:
                last = write_ckpt(done)
        return last if last is not None else write_ckpt(train_cfg.total_iters)
