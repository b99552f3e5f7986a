"""Bicubic resampling shared by dataset synthesis, the network skip path,
and evaluation baselines.

A single implementation keeps every consumer bitwise-consistent: the model's
bicubic skip, the bicubic baseline used in evaluation, and the LR synthesis
path all call :func:`resize_bicubic`. The kernel is the Catmull-Rom cubic
(a = -0.5), stretched for anti-aliasing when downscaling, with
replicate-border handling and per-row weight normalization.
"""

from __future__ import annotations

import numpy as np
import torch

_A = -0.5

# (n_in, n_out, antialias, dtype, device) -> weight matrix of shape (n_out, n_in)
_MATRIX_CACHE: dict = {}


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = (_A + 2.0) * ax3 - (_A + 3.0) * ax2 + 1.0
    outer = _A * ax3 - 5.0 * _A * ax2 + 8.0 * _A * ax - 4.0 * _A
    out = np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))
    return out


def _weight_matrix_np(n_in: int, n_out: int, antialias: bool) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix, float64, rows summing to 1."""
    scale = n_out / n_in
    # Stretch the kernel when minifying so it acts as an anti-aliasing filter.
    kscale = scale if (antialias and scale < 1.0) else 1.0
    support = 2.0 / kscale

    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        lo = int(np.ceil(u - support))
        hi = int(np.floor(u + support))
        taps = np.arange(lo, hi + 1)
        vals = _cubic_kernel((u - taps) * kscale) * kscale
        s = vals.sum()
        if s != 0.0:
            vals = vals / s
        # Replicate-border: out-of-range taps accumulate onto the edge pixel.
        idx = np.clip(taps, 0, n_in - 1)
        np.add.at(w[i], idx, vals)
    return w


def resize_matrix(n_in: int, n_out: int, antialias: bool,
                  dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    key = (n_in, n_out, antialias, dtype, str(device))
    mat = _MATRIX_CACHE.get(key)
    if mat is None:
        mat = torch.from_numpy(_weight_matrix_np(n_in, n_out, antialias))
        mat = mat.to(dtype=dtype, device=device)
        _MATRIX_CACHE[key] = mat
    return mat


def resize_bicubic(x: torch.Tensor, out_h: int, out_w: int,
                   antialias: bool | None = None) -> torch.Tensor:
    """Resize the trailing two dims of ``x`` to (out_h, out_w).

    ``antialias=None`` enables the low-pass kernel automatically for
    downscaling; pure upscaling never anti-aliases. Identity sizes are
    returned unchanged (exact).
    """
    h, w = x.shape[-2], x.shape[-1]
    if h == out_h and w == out_w:
        return x
    aa_h = antialias if antialias is not None else out_h < h
    aa_w = antialias if antialias is not None else out_w < w
    mh = resize_matrix(h, out_h, aa_h, x.dtype, x.device)
    mw = resize_matrix(w, out_w, aa_w, x.dtype, x.device)
    y = torch.matmul(mh, x) if out_h != h else x
    y = torch.matmul(y, mw.transpose(0, 1)) if out_w != w else y
    return y


def resize_bicubic_np(arr: np.ndarray, out_h: int, out_w: int,
                      antialias: bool | None = None) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr))
    return resize_bicubic(t, out_h, out_w, antialias=antialias).numpy()


def upsample_frame(frame: torch.Tensor, scale: int) -> torch.Tensor:
    """Bicubic-upsample an image tensor (..., H, W) by an integer factor."""
    return resize_bicubic(frame, frame.shape[-2] * scale, frame.shape[-1] * scale)
