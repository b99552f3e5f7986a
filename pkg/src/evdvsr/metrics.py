"""Quantitative evaluation: PSNR, SSIM, and temporal-consistency metrics.

tOF and TCC are operationalized here so results are reproducible within this
artifact: tOF compares dense optical flow computed by a fixed classical
estimator (3-level pyramidal Horn-Schunck, fixed iteration count, no learned
weights) on the prediction pair versus the ground-truth pair; TCC compares
temporal-difference maps via SSIM. tOF runs on BT.601 luminance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d, uniform_filter

from evdvsr.errors import InvalidInputError
from evdvsr.events import luminance

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

FLOW_LEVELS = 3
FLOW_ITERS = 100
FLOW_ALPHA = 0.5   # regularization weight, calibrated for [0, 1] intensities


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise InvalidInputError("pred/gt shape mismatch")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
            raise InvalidInputError(f"{name} values must lie in [0, 1]")


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10*log10(1/MSE) on [0,1] RGB data, capped at 99 dB (saturation)."""
    _check_pair(pred, gt)
    mse = float(np.mean((pred.astype(np.float64) - gt.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def psnr_saturated(value: float) -> bool:
    return value >= PSNR_CAP_DB


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    xs = np.arange(size, dtype=np.float64) - half
    win = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return win / win.sum()


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-region Gaussian-window means of a (H, W) image."""
    r = len(win) // 2
    out = convolve1d(img, win, axis=-1, mode="nearest")
    out = convolve1d(out, win, axis=-2, mode="nearest")
    return out[..., r:-r, r:-r]


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window, averaged over
    channels and valid windows."""
    _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape[-2] < SSIM_WINDOW or pred.shape[-1] < SSIM_WINDOW:
        raise InvalidInputError("image smaller than the SSIM window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    vals = []
    for a, b in zip(pred.reshape(-1, *pred.shape[-2:]),
                    gt.reshape(-1, *gt.shape[-2:])):
        a = a.astype(np.float64)
        b = b.astype(np.float64)
        mu_a = _windowed_mean(a, win)
        mu_b = _windowed_mean(b, win)
        var_a = _windowed_mean(a * a, win) - mu_a ** 2
        var_b = _windowed_mean(b * b, win) - mu_b ** 2
        cov = _windowed_mean(a * b, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2]
                   + img[0::2, 1::2] + img[1::2, 1::2])


def _warp_scalar(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = np.clip(xs + u, 0, w - 1)
    cy = np.clip(ys + v, 0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def _hs_refine(i1, i2w, u, v, alpha, iters):
    iy, ix = np.gradient(0.5 * (i1 + i2w))
    it = i2w - i1
    den = alpha ** 2 + ix ** 2 + iy ** 2
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    for _ in range(iters):
        dua = uniform_filter(du, 3, mode="nearest")
        dva = uniform_filter(dv, 3, mode="nearest")
        t = (ix * dua + iy * dva + it) / den
        du = dua - ix * t
        dv = dva - iy * t
    return u + du, v + dv


def estimate_flow_classical(i1: np.ndarray, i2: np.ndarray) -> np.ndarray:
    """Dense flow i1 -> i2 on (H, W) luminance, deterministic.

    Coarse-to-fine Horn-Schunck with a fixed pyramid depth and iteration
    budget; returns (2, H, W) as (dx, dy).
    """
    if i1.shape != i2.shape or i1.ndim != 2:
        raise InvalidInputError("flow estimation expects matching (H, W) maps")
    pyr1, pyr2 = [i1.astype(np.float64)], [i2.astype(np.float64)]
    for _ in range(FLOW_LEVELS - 1):
        pyr1.append(_downsample2(pyr1[-1]))
        pyr2.append(_downsample2(pyr2[-1]))
    u = np.zeros_like(pyr1[-1])
    v = np.zeros_like(pyr1[-1])
    for lvl in range(FLOW_LEVELS - 1, -1, -1):
        if lvl < FLOW_LEVELS - 1:
            u = 2.0 * _upsample2(u, pyr1[lvl].shape)
            v = 2.0 * _upsample2(v, pyr1[lvl].shape)
        warped = _warp_scalar(pyr2[lvl], u, v)
        u, v = _hs_refine(pyr1[lvl], warped, u, v, FLOW_ALPHA, FLOW_ITERS)
    return np.stack([u, v])


def _upsample2(img: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    ys = (np.arange(h) + 0.5) / h * img.shape[0] - 0.5
    xs = (np.arange(w) + 0.5) / w * img.shape[1] - 0.5
    ys = np.clip(ys, 0, img.shape[0] - 1)
    xs = np.clip(xs, 0, img.shape[1] - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return ((1 - fy) * (1 - fx) * img[np.ix_(y0, x0)]
            + (1 - fy) * fx * img[np.ix_(y0, x1)]
            + fy * (1 - fx) * img[np.ix_(y1, x0)]
            + fy * fx * img[np.ix_(y1, x1)])


def tof(pred_clip: np.ndarray, gt_clip: np.ndarray) -> float:
    """Temporal flow consistency: mean L1 difference (pixels) between flows
    of consecutive prediction pairs and the same ground-truth pairs."""
    if pred_clip.shape != gt_clip.shape:
        raise InvalidInputError("pred/gt clip shape mismatch")
    if pred_clip.shape[0] < 2:
        raise InvalidInputError("tOF needs clips of length >= 2")
    lum_p = luminance(pred_clip)
    lum_g = luminance(gt_clip)
    diffs = []
    for t in range(pred_clip.shape[0] - 1):
        fp = estimate_flow_classical(lum_p[t], lum_p[t + 1])
        fg = estimate_flow_classical(lum_g[t], lum_g[t + 1])
        diffs.append(np.mean(np.sum(np.abs(fp - fg), axis=0)))
    return float(np.mean(diffs))


def tcc(pred_clip: np.ndarray, gt_clip: np.ndarray) -> float:
    """Temporal consistency: SSIM between temporal-difference maps, shifted
    to [0, 1], averaged over consecutive pairs."""
    if pred_clip.shape != gt_clip.shape:
        raise InvalidInputError("pred/gt clip shape mismatch")
    if pred_clip.shape[0] < 2:
        raise InvalidInputError("TCC needs clips of length >= 2")
    vals = []
    for t in range(pred_clip.shape[0] - 1):
        dp = np.clip((pred_clip[t + 1].astype(np.float64)
                      - pred_clip[t] + 1.0) / 2.0, 0.0, 1.0)
        dg = np.clip((gt_clip[t + 1].astype(np.float64)
                      - gt_clip[t] + 1.0) / 2.0, 0.0, 1.0)
        vals.append(ssim(dp, dg))
    return float(np.mean(vals))


@dataclass
class ClipMetrics:
    clip: str
    psnr: float
    ssim: float
    tof: float
    tcc: float
    frames: int

    @property
    def saturated(self) -> bool:
        return psnr_saturated(self.psnr)


@dataclass
class MetricReport:
    rows: list[ClipMetrics] = field(default_factory=list)

    def add(self, row: ClipMetrics):
        self.rows.append(row)

    def aggregate(self, frame_weighted: bool = False) -> ClipMetrics:
        if not self.rows:
            raise InvalidInputError("empty metric report")
        w = np.array([r.frames if frame_weighted else 1.0 for r in self.rows],
                     dtype=np.float64)
        w = w / w.sum()

        def mix(vals):
            return float(np.sum(w * np.asarray(vals, dtype=np.float64)))

        return ClipMetrics(
            clip="ALL",
            psnr=mix([r.psnr for r in self.rows]),
            ssim=mix([r.ssim for r in self.rows]),
            tof=mix([r.tof for r in self.rows]),
            tcc=mix([r.tcc for r in self.rows]),
            frames=int(sum(r.frames for r in self.rows)),
        )

    def machine_lines(self, frame_weighted: bool = False) -> str:
        lines = []
        for r in [*self.rows, self.aggregate(frame_weighted)]:
            lines.append(f"{r.clip}, {r.psnr:.4f}, {r.ssim:.6f}, "
                         f"{r.tof:.4f}, {r.tcc:.6f}")
        return "\n".join(lines) + "\n"

    def table(self, frame_weighted: bool = False) -> str:
        rows = [*self.rows, self.aggregate(frame_weighted)]
        header = f"{'clip':<16}{'psnr(dB)':>10}{'ssim':>10}" \
                 f"{'tof(px)':>10}{'tcc':>10}  "
        lines = [header, "-" * len(header)]
        for r in rows:
            mark = " sat" if r.saturated else ""
            lines.append(f"{r.clip:<16}{r.psnr:>10.2f}{r.ssim:>10.4f}"
                         f"{r.tof:>10.3f}{r.tcc:>10.4f}{mark}")
        return "\n".join(lines) + "\n"


def evaluate_clip(name: str, pred_clip: np.ndarray,
                  gt_clip: np.ndarray) -> ClipMetrics:
    return ClipMetrics(
        clip=name,
        psnr=psnr(pred_clip, gt_clip),
        ssim=float(np.mean([ssim(p, g) for p, g in zip(pred_clip, gt_clip)])),
        tof=tof(pred_clip, gt_clip),
        tcc=tcc(pred_clip, gt_clip),
        frames=pred_clip.shape[0],
    )
