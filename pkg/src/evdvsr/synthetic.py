"""Procedural moving-shape clips for self-contained datasets.

Each clip renders a static textured background plus a few moving sprites
(axis-aligned rectangles, rotating rectangles, and textured patches) at HR
resolution and a high subframe rate, then derives blurry LR frames, sharp HR
targets, and LR/HR event streams from it. Shape speeds and the
subframes-per-exposure count keep blur extent and event density in a regime
where motion genuinely matters at 64x64 LR.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evdvsr.config import SimConfig
from evdvsr.errors import InvalidInputError
from evdvsr.events import (EventStream, ExposureWindow, downsample_bicubic,
                           luminance, simulate_events, synthesize_blur)


def _fold(value: np.ndarray | float, span: float) -> np.ndarray | float:
    """Reflect a coordinate into [0, span] (bouncing motion)."""
    period = 2.0 * span
    v = np.mod(value, period)
    return np.where(v > span, period - v, v) if isinstance(v, np.ndarray) \
        else (period - v if v > span else v)


@dataclass
class _Shape:
    kind: str                 # rect | rot_rect | sprite
    pos0: np.ndarray          # HR pixels
    vel: np.ndarray           # HR pixels per microsecond
    size: np.ndarray
    color: np.ndarray
    omega: float = 0.0        # radians per microsecond
    phase: float = 0.0
    texture: np.ndarray | None = None


def _make_shapes(rng: np.random.Generator, cfg: SimConfig,
                 sh: int, sw: int) -> list[_Shape]:
    shapes = []
    period = float(cfg.frame_period_us)
    for i in range(cfg.num_shapes):
        kind = ("sprite", "rect", "rot_rect", "sprite")[i % 4]
        speed_lr = rng.uniform(cfg.speed_min, cfg.speed_max)   # LR px / frame
        speed = speed_lr * cfg.scale / period                  # HR px / us
        angle = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(angle), np.sin(angle)])
        size = rng.uniform(0.15, 0.35, size=2) * min(sh, sw)
        shape = _Shape(
            kind=kind,
            pos0=rng.uniform(0.2, 0.8, size=2) * np.array([sw, sh]),
            vel=vel,
            size=size,
            color=rng.uniform(0.15, 0.95, size=3),
            omega=rng.uniform(-1.0, 1.0) * 0.5 * np.pi / (10 * period),
            phase=rng.uniform(0, 2 * np.pi),
        )
        if kind == "sprite":
            tex_hw = max(8, int(size[1]) // 2), max(8, int(size[0]) // 2)
            base = rng.uniform(0.05, 0.95, size=(3, *tex_hw)).astype(np.float32)
            shape.texture = base
        shapes.append(shape)
    return shapes


def _render_rect(canvas, cx, cy, w2, h2, color, rot=None):
    """Anti-aliased filled rectangle centered at (cx, cy)."""
    _, sh, sw = canvas.shape
    pad = int(np.ceil(max(w2, h2) * 1.5)) + 2
    x0, x1 = max(0, int(cx) - pad), min(sw, int(cx) + pad)
    y0, y1 = max(0, int(cy) - pad), min(sh, int(cy) + pad)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if rot is not None:
        c, s = np.cos(rot), np.sin(rot)
        dx, dy = c * dx + s * dy, -s * dx + c * dy
    cov = (np.clip(w2 - np.abs(dx) + 0.5, 0, 1)
           * np.clip(h2 - np.abs(dy) + 0.5, 0, 1))
    region = canvas[:, y0:y1, x0:x1]
    region += cov[None] * (color[:, None, None] - region)


def _render_sprite(canvas, cx, cy, texture):
    _, sh, sw = canvas.shape
    th, tw = texture.shape[1:]
    x0 = int(np.floor(cx - tw / 2))
    y0 = int(np.floor(cy - th / 2))
    xa, xb = max(0, x0), min(sw, x0 + tw)
    ya, yb = max(0, y0), min(sh, y0 + th)
    if xa >= xb or ya >= yb:
        return
    ys, xs = np.mgrid[ya:yb, xa:xb].astype(np.float64)
    # bilinear texture lookup at sub-pixel offsets
    u = np.clip(xs - (cx - tw / 2), 0, tw - 1.000001)
    v = np.clip(ys - (cy - th / 2), 0, th - 1.000001)
    u0, v0 = np.floor(u).astype(int), np.floor(v).astype(int)
    fu, fv = u - u0, v - v0
    tex = ((1 - fv) * (1 - fu) * texture[:, v0, u0]
           + (1 - fv) * fu * texture[:, v0, u0 + 1]
           + fv * (1 - fu) * texture[:, v0 + 1, u0]
           + fv * fu * texture[:, v0 + 1, u0 + 1])
    canvas[:, ya:yb, xa:xb] = tex


def _background(rng: np.random.Generator, sh: int, sw: int) -> np.ndarray:
    ys = np.linspace(0.25, 0.55, sh)[None, :, None]
    xs = np.linspace(0.2, 0.5, sw)[None, None, :]
    bg = np.broadcast_to(ys + xs * np.array([0.9, 1.0, 1.1])[:, None, None],
                         (3, sh, sw)).copy()
    # a little static texture so super-resolution has structure to recover
    blob = rng.uniform(-0.08, 0.08, size=(3, sh // 8, sw // 8))
    bg += np.repeat(np.repeat(blob, 8, axis=1), 8, axis=2)[:, :sh, :sw]
    return np.clip(bg, 0.0, 1.0)


def render_clip(rng: np.random.Generator, cfg: SimConfig
                ) -> tuple[np.ndarray, np.ndarray, list[ExposureWindow]]:
    """High-rate sharp HR frames + timestamps + exposure plan for one clip."""
    sh = cfg.lr_height * cfg.scale
    sw = cfg.lr_width * cfg.scale
    shapes = _make_shapes(rng, cfg, sh, sw)
    bg = _background(rng, sh, sw)

    period = cfg.frame_period_us
    n_sub = cfg.subframes_per_blur
    total = cfg.frames_per_clip * n_sub + 1
    timestamps = np.rint(np.arange(total) * (period / n_sub)).astype(np.int64)

    frames = np.empty((total, 3, sh, sw), dtype=np.float32)
    margin = 0.1 * min(sh, sw)
    for i, t in enumerate(timestamps):
        canvas = bg.copy()
        for s in shapes:
            px = margin + _fold(s.pos0[0] - margin + s.vel[0] * t,
                                sw - 2 * margin)
            py = margin + _fold(s.pos0[1] - margin + s.vel[1] * t,
                                sh - 2 * margin)
            if s.kind == "rect":
                _render_rect(canvas, px, py, s.size[0] / 2, s.size[1] / 2,
                             s.color)
            elif s.kind == "rot_rect":
                _render_rect(canvas, px, py, s.size[0] / 2, s.size[1] / 3,
                             s.color, rot=s.phase + s.omega * t)
            else:
                _render_sprite(canvas, px, py, s.texture)
        frames[i] = np.clip(canvas, 0.0, 1.0)

    exp_len = int(round(cfg.exposure_duty * period))
    exposures = [ExposureWindow(k * period, k * period + exp_len, k)
                 for k in range(cfg.frames_per_clip)]
    if exposures[-1].t_end > timestamps[-1]:
        raise InvalidInputError("exposure plan exceeds the rendered clip")
    return frames, timestamps, exposures


def derive_clip_artifacts(sharp_frames: np.ndarray, timestamps: np.ndarray,
                          exposures: list[ExposureWindow], scale: int,
                          theta: float) -> dict:
    """Blur/LR/GT frames and LR+HR event streams for one rendered clip."""
    lr_frames = np.stack([downsample_bicubic(f, scale) for f in sharp_frames])
    gray_lr = np.clip(luminance(lr_frames), 0.0, 1.0)
    gray_hr = np.clip(luminance(sharp_frames), 0.0, 1.0)
    ev_lr = simulate_events(gray_lr, timestamps, theta)
    ev_hr = simulate_events(gray_hr, timestamps, theta)

    blurry, sharp_gt = [], []
    for win in exposures:
        members = np.flatnonzero((timestamps >= win.t_start)
                                 & (timestamps <= win.t_end))
        blur_hr = synthesize_blur(sharp_frames[members])
        blurry.append(downsample_bicubic(blur_hr, scale))
        nearest = members[np.argmin(np.abs(
            timestamps[members].astype(np.float64) - win.mid))]
        sharp_gt.append(sharp_frames[nearest])
    return {
        "blurry_lr": np.stack(blurry).astype(np.float32),
        "sharp_hr": np.stack(sharp_gt).astype(np.float32),
        "events_lr": ev_lr,
        "events_hr": ev_hr,
        "exposures": exposures,
    }


def generate_dataset(out_root: str | Path, cfg: SimConfig) -> list[str]:
    """Write ``cfg.clips`` synthetic clips plus a manifest; returns clip names."""
    from evdvsr import eventio

    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    names = []
    for c in range(cfg.clips):
        rng = np.random.default_rng([cfg.seed, c])
        frames, timestamps, exposures = render_clip(rng, cfg)
        art = derive_clip_artifacts(frames, timestamps, exposures,
                                    cfg.scale, cfg.theta)
        name = f"clip_{c:03d}"
        eventio.write_clip_dir(out_root / name, art["blurry_lr"],
                               art["sharp_hr"], art["events_lr"],
                               art["events_hr"], exposures)
        names.append(name)
    eventio.write_manifest(out_root, {
        "format": "evdvsr-dataset-1",
        "seed": cfg.seed,
        "theta": cfg.theta,
        "scale": cfg.scale,
        "bins": cfg.bins,
        "clips": names,
        "frames_per_clip": cfg.frames_per_clip,
        "lr_size": [cfg.lr_height, cfg.lr_width],
        "exposure_duty": cfg.exposure_duty,
        "frame_period_us": cfg.frame_period_us,
        "subframes_per_blur": cfg.subframes_per_blur,
        "speed_range_lr_px": [cfg.speed_min, cfg.speed_max],
        "num_shapes": cfg.num_shapes,
    })
    return names
