"""Event simulation, exposure-aware segmentation, and voxel representations.

Everything upstream of the network lives here: a threshold-crossing event
simulator, blur/LR synthesis, splitting of a stream into intra-exposure and
inter-frame slices, bilinear-in-time voxelization, and the HR edge masks that
weight the edge-enhanced loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from evdvsr.errors import InvalidInputError
from evdvsr.resize import resize_bicubic_np

# Offset added before taking logs so black pixels stay finite.
LOG_EPS = 1e-3

# ITU-R BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class Event(NamedTuple):
    """A single polarity event: pixel location, microsecond timestamp, sign."""

    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Time-ordered polarity events with sensor geometry.

    Events are stored as parallel arrays; ``events`` materializes
    :class:`Event` tuples for small streams and tests.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_min: int
    t_max: int

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.p = np.asarray(self.p, dtype=np.int8)
        self.validate()

    def validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise InvalidInputError("event arrays must have equal length")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise InvalidInputError("event timestamps must be non-decreasing")
            if self.t[0] < self.t_min or self.t[-1] > self.t_max:
                raise InvalidInputError("event timestamps outside [t_min, t_max]")
            if np.any((self.x < 0) | (self.x >= self.width)):
                raise InvalidInputError("event x outside sensor width")
            if np.any((self.y < 0) | (self.y >= self.height)):
                raise InvalidInputError("event y outside sensor height")
            if np.any(np.abs(self.p) != 1):
                raise InvalidInputError("polarity must be exactly -1 or +1")
        if self.t_min > self.t_max:
            raise InvalidInputError("t_min must not exceed t_max")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def events(self) -> list[Event]:
        return [Event(int(x), int(y), int(t), int(p))
                for x, y, t, p in zip(self.x, self.y, self.t, self.p)]

    def select(self, mask: np.ndarray, t_min: int, t_max: int) -> "EventStream":
        return EventStream(self.t[mask], self.x[mask], self.y[mask],
                           self.p[mask], self.width, self.height,
                           int(t_min), int(t_max))


@dataclass(frozen=True)
class ExposureWindow:
    """The open-shutter interval of one blurry frame, in microseconds."""

    t_start: int
    t_end: int
    frame_index: int

    def __post_init__(self):
        if self.t_start >= self.t_end:
            raise InvalidInputError(
                f"exposure window must have t_start < t_end, got "
                f"[{self.t_start}, {self.t_end}]")

    @property
    def mid2(self) -> int:
        """Twice the midpoint; kept doubled so half-integer mids stay exact."""
        return self.t_start + self.t_end

    @property
    def mid(self) -> float:
        return 0.5 * self.mid2


@dataclass
class VoxelGrid:
    """B x H x W time-discretized slice of an event stream."""

    data: np.ndarray
    kind: str
    window: tuple[float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InvalidInputError("voxel grid must be (bins, height, width)")
        if self.kind not in ("intra", "inter_forward", "inter_backward"):
            raise InvalidInputError(f"unknown voxel kind {self.kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("voxel grid entries must be finite")

    @property
    def bins(self) -> int:
        return self.data.shape[0]


@dataclass
class SequenceSample:
    """One training/eval sample: T blurry LR frames with voxels and HR targets.

    ``sharp_hr`` and ``edge_masks`` may be absent (inference-only samples).
    """

    blurry_lr: np.ndarray                 # (T, 3, h, w) in [0, 1]
    intra_voxels: list[VoxelGrid]         # T grids at LR resolution
    fwd_voxels: list[VoxelGrid]           # T-1 grids
    bwd_voxels: list[VoxelGrid]           # T-1 grids
    scale: int
    sharp_hr: np.ndarray | None = None    # (T, 3, s*h, s*w)
    edge_masks: np.ndarray | None = None  # (T, 3, s*h, s*w) in [0, 1]

    def __post_init__(self):
        t, _, h, w = self.blurry_lr.shape
        if t < 2:
            raise InvalidInputError("a sequence sample needs at least 2 frames")
        if len(self.intra_voxels) != t:
            raise InvalidInputError("need one intra voxel grid per frame")
        if len(self.fwd_voxels) != t - 1 or len(self.bwd_voxels) != t - 1:
            raise InvalidInputError("need T-1 inter voxel grids per direction")
        for v in (*self.intra_voxels, *self.fwd_voxels, *self.bwd_voxels):
            if v.data.shape[1:] != (h, w):
                raise InvalidInputError("voxel grids must match LR geometry")
        if self.sharp_hr is not None:
            if self.sharp_hr.shape != (t, 3, h * self.scale, w * self.scale):
                raise InvalidInputError("sharp HR shape inconsistent with scale")
        if self.edge_masks is not None:
            if self.edge_masks.shape != (t, 3, h * self.scale, w * self.scale):
                raise InvalidInputError("edge mask shape inconsistent with scale")
            if self.edge_masks.min() < 0.0 or self.edge_masks.max() > 1.0:
                raise InvalidInputError("edge mask entries must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.blurry_lr.shape[0]


def luminance(frames: np.ndarray) -> np.ndarray:
    """BT.601 luma of (..., 3, H, W) images."""
    return np.tensordot(_LUMA, frames.astype(np.float64),
                        axes=([0], [frames.ndim - 3]))


def simulate_events(frames: np.ndarray, timestamps: Sequence[int],
                    theta: float) -> EventStream:
    """Ideal per-pixel threshold-crossing event simulation.

    Each pixel tracks the log-intensity level of its last emitted event; every
    crossing of a multiple of ``theta`` relative to that level between
    consecutive frames emits one event, timestamped by linear interpolation.
    No noise, refractory period, or bandwidth limit is modeled.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise InvalidInputError("expected grayscale frames of shape (N, H, W)")
    n_frames, height, width = frames.shape
    if n_frames < 2:
        raise InvalidInputError("event simulation needs at least 2 frames")
    if theta <= 0:
        raise InvalidInputError("contrast threshold must be positive")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise InvalidInputError("frame intensities must lie in [0, 1]")
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if timestamps.shape != (n_frames,):
        raise InvalidInputError("need one timestamp per frame")
    if np.any(np.diff(timestamps) <= 0):
        raise InvalidInputError("frame timestamps must be strictly increasing")

    log_frames = np.log(frames + LOG_EPS)
    ref = log_frames[0].copy()          # level of the last event, per pixel
    ys, xs = np.mgrid[0:height, 0:width]
    ys = ys.ravel()
    xs = xs.ravel()

    out_t, out_x, out_y, out_p = [], [], [], []
    for k in range(1, n_frames):
        prev = log_frames[k - 1].ravel()
        curr = log_frames[k].ravel()
        rflat = ref.ravel()
        t0 = float(timestamps[k - 1])
        dt = float(timestamps[k] - timestamps[k - 1])

        for sign in (+1, -1):
            drift = (curr - rflat) * sign
            count = np.floor(drift / theta).astype(np.int64)
            np.clip(count, 0, None, out=count)
            hit = np.flatnonzero(count > 0)
            if hit.size == 0:
                continue
            reps = count[hit]
            pix = np.repeat(hit, reps)
            # k-th crossing index within each pixel: 1..count
            kidx = np.arange(reps.sum()) - np.repeat(
                np.cumsum(reps) - reps, reps) + 1
            levels = rflat[pix] + sign * kidx * theta
            denom = curr[pix] - prev[pix]
            # Crossing levels can sit a rounding error outside (prev, curr];
            # clip so degenerate pairs land on the pair boundary.
            frac = np.where(denom != 0.0,
                            (levels - prev[pix])
                            / np.where(denom == 0.0, 1.0, denom), 1.0)
            np.clip(frac, 0.0, 1.0, out=frac)
            ts = np.rint(t0 + frac * dt).astype(np.int64)
            out_t.append(ts)
            out_x.append(xs[pix])
            out_y.append(ys[pix])
            out_p.append(np.full(pix.shape, sign, dtype=np.int8))
            rflat[hit] += sign * reps * theta

    if out_t:
        t = np.concatenate(out_t)
        x = np.concatenate(out_x)
        y = np.concatenate(out_y)
        p = np.concatenate(out_p)
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    else:
        t = np.empty(0, dtype=np.int64)
        x = np.empty(0, dtype=np.int32)
        y = np.empty(0, dtype=np.int32)
        p = np.empty(0, dtype=np.int8)
    return EventStream(t, x, y, p, width, height,
                       int(timestamps[0]), int(timestamps[-1]))


def synthesize_blur(frames: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Blur synthesis: pixel-wise mean of the sharp frames in one exposure.

    Accumulates in float64, which makes the mean exactly permutation-invariant
    for float32 inputs at realistic frame counts.
    """
    frames = np.asarray(frames)
    if frames.ndim < 3 or frames.shape[0] == 0:
        raise InvalidInputError("blur synthesis needs at least one frame")
    mean = np.mean(frames.astype(np.float64), axis=0)
    return mean.astype(np.float32)


def downsample_bicubic(frame: np.ndarray, scale: int) -> np.ndarray:
    """Anti-aliased bicubic downsampling by an integer factor."""
    if scale < 1:
        raise InvalidInputError("scale must be a positive integer")
    h, w = frame.shape[-2], frame.shape[-1]
    if h % scale or w % scale:
        raise InvalidInputError(
            f"frame size {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        return frame.copy()
    out = resize_bicubic_np(np.ascontiguousarray(frame, dtype=frame.dtype),
                            h // scale, w // scale, antialias=True)
    return out


def _check_exposures(exposures: Sequence[ExposureWindow]):
    if not exposures:
        raise InvalidInputError("need at least one exposure window")
    for a, b in zip(exposures, exposures[1:]):
        if b.t_start <= a.t_end:
            raise InvalidInputError(
                "exposure windows must be ordered and disjoint")


def segment_events(stream: EventStream,
                   exposures: Sequence[ExposureWindow]
                   ) -> tuple[list[EventStream], list[EventStream]]:
    """Split a stream into per-frame intra slices and between-frame inter slices.

    Intra slice t keeps events inside the closed exposure window. Inter slice
    t-1->t keeps events in the half-open interval (mid(T_{t-1}), mid(T_t)],
    where mid is the exposure midpoint; comparisons run on doubled integer
    timestamps so half-integer midpoints stay exact.
    """
    _check_exposures(exposures)
    intra = []
    for w in exposures:
        mask = (stream.t >= w.t_start) & (stream.t <= w.t_end)
        intra.append(stream.select(mask, w.t_start, w.t_end))
    inter = []
    t2 = stream.t.astype(np.int64) * 2
    for a, b in zip(exposures, exposures[1:]):
        mask = (t2 > a.mid2) & (t2 <= b.mid2)
        lo = a.mid2 // 2 + 1          # first integer microsecond > mid(a)
        hi = b.mid2 // 2              # last integer microsecond <= mid(b)
        inter.append(stream.select(mask, lo, max(lo, hi)))
    return intra, inter


def inter_window(a: ExposureWindow, b: ExposureWindow) -> tuple[float, float]:
    """The (mid(a), mid(b)] time interval one inter slice covers."""
    return (a.mid, b.mid)


def voxelize(events: EventStream, window: tuple[float, float], num_bins: int,
             width: int, height: int, reverse: bool = False,
             kind: str | None = None) -> VoxelGrid:
    """Accumulate an event slice into a (B, H, W) voxel grid.

    Each event spreads its polarity over the two temporally adjacent bins with
    bilinear weights on the normalized time t* = (B-1)(t - t0)/(t1 - t0).
    ``reverse`` builds the time-mirrored grid (bins flipped, polarity negated),
    which describes the reversed brightness-change process; it is applied as an
    exact transform of the forward grid so double reversal is an involution.
    """
    t0, t1 = float(window[0]), float(window[1])
    if not t1 > t0:
        raise InvalidInputError("voxelization window must have positive length")
    if num_bins < 1:
        raise InvalidInputError("need at least one bin")
    if kind is None:
        kind = "inter_backward" if reverse else "intra"

    grid = np.zeros((num_bins, height, width), dtype=np.float64)
    if len(events):
        tstar = (num_bins - 1) * (events.t.astype(np.float64) - t0) / (t1 - t0)
        if num_bins == 1:
            tstar = np.zeros_like(tstar)
        b0 = np.floor(tstar).astype(np.int64)
        frac = tstar - b0
        pol = events.p.astype(np.float64)
        ys = events.y.astype(np.int64)
        xs = events.x.astype(np.int64)
        for b, wgt in ((b0, pol * (1.0 - frac)), (b0 + 1, pol * frac)):
            ok = (b >= 0) & (b < num_bins) & (wgt != 0.0)
            np.add.at(grid, (b[ok], ys[ok], xs[ok]), wgt[ok])
    if reverse:
        grid = -grid[::-1].copy()
    return VoxelGrid(grid, kind, (t0, t1))


def reverse_voxels(grid: VoxelGrid) -> VoxelGrid:
    """Time-mirror a voxel grid: flip the bin axis and negate polarity."""
    flipped = {"intra": "intra", "inter_forward": "inter_backward",
               "inter_backward": "inter_forward"}[grid.kind]
    return VoxelGrid(-grid.data[::-1].copy(), flipped, grid.window)


def hr_edge_mask(events: EventStream, window: tuple[float, float],
                 height: int, width: int, num_bins: int = 5) -> np.ndarray:
    """Edge-related loss weights from an HR intra slice.

    Bin-sums the HR voxel grid to a signed map, normalizes it by its max
    absolute value into [-1, +1], and keeps the absolute value, replicated to
    three channels.
    """
    grid = voxelize(events, window, num_bins, width, height, kind="intra")
    signed = grid.data.sum(axis=0)
    peak = np.abs(signed).max()
    if peak > 0:
        signed = signed / peak
    mask = np.abs(signed).astype(np.float32)
    return np.repeat(mask[None], 3, axis=0)


def _frames_in_window(timestamps: np.ndarray, w: ExposureWindow) -> np.ndarray:
    return np.flatnonzero((timestamps >= w.t_start) & (timestamps <= w.t_end))


def build_sequence_sample(sharp_frames: np.ndarray, timestamps: Sequence[int],
                          exposures: Sequence[ExposureWindow], scale: int = 4,
                          num_bins: int = 5, theta: float = 0.15,
                          ) -> SequenceSample:
    """Compose the full synthesis protocol into one SequenceSample.

    ``sharp_frames`` is a high-frame-rate sharp HR clip (N, 3, sH, sW). Each
    exposure window is averaged into a blurry HR frame and bicubic-downsampled
    to LR; LR events are simulated on the bicubic-downsampled sharp frames, HR
    events on the originals (they drive the edge masks); the sharp HR target
    is the frame nearest the exposure midpoint.
    """
    sharp_frames = np.asarray(sharp_frames, dtype=np.float32)
    if sharp_frames.ndim != 4 or sharp_frames.shape[1] != 3:
        raise InvalidInputError("sharp clip must have shape (N, 3, H, W)")
    timestamps = np.asarray(timestamps, dtype=np.int64)
    _check_exposures(exposures)
    n, _, sh, sw = sharp_frames.shape
    if timestamps.shape != (n,):
        raise InvalidInputError("need one timestamp per sharp frame")
    if exposures[0].t_start < timestamps[0] or exposures[-1].t_end > timestamps[-1]:
        raise InvalidInputError("clip does not cover the exposure plan")

    lr_frames = np.stack([downsample_bicubic(f, scale) for f in sharp_frames])
    h, w = lr_frames.shape[-2:]

    gray_hr = np.clip(luminance(sharp_frames), 0.0, 1.0)
    gray_lr = np.clip(luminance(lr_frames), 0.0, 1.0)
    ev_lr = simulate_events(gray_lr, timestamps, theta)
    ev_hr = simulate_events(gray_hr, timestamps, theta)

    intra_lr, inter_lr = segment_events(ev_lr, exposures)
    intra_hr, _ = segment_events(ev_hr, exposures)

    blurry, sharp_gt, intra_vox, masks = [], [], [], []
    for i, win in enumerate(exposures):
        members = _frames_in_window(timestamps, win)
        if members.size == 0:
            raise InvalidInputError(
                f"no sharp frames inside exposure {win.frame_index}")
        blur_hr = synthesize_blur(sharp_frames[members])
        blurry.append(downsample_bicubic(blur_hr, scale))
        nearest = members[np.argmin(np.abs(
            timestamps[members].astype(np.float64) - win.mid))]
        sharp_gt.append(sharp_frames[nearest])
        intra_vox.append(voxelize(intra_lr[i], (win.t_start, win.t_end),
                                  num_bins, w, h, kind="intra"))
        masks.append(hr_edge_mask(intra_hr[i], (win.t_start, win.t_end),
                                  sh, sw, num_bins))

    fwd_vox, bwd_vox = [], []
    for i, (a, b) in enumerate(zip(exposures, exposures[1:])):
        win = inter_window(a, b)
        fwd_vox.append(voxelize(inter_lr[i], win, num_bins, w, h,
                                kind="inter_forward"))
        bwd_vox.append(voxelize(inter_lr[i], win, num_bins, w, h,
                                reverse=True, kind="inter_backward"))

    return SequenceSample(
        blurry_lr=np.stack(blurry).astype(np.float32),
        intra_voxels=intra_vox,
        fwd_voxels=fwd_vox,
        bwd_voxels=bwd_vox,
        scale=scale,
        sharp_hr=np.stack(sharp_gt).astype(np.float32),
        edge_masks=np.stack(masks).astype(np.float32),
    )
