"""Clip loading and batching: dataset directories -> SequenceSamples -> tensors."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from evdvsr.errors import DataError, InvalidInputError
from evdvsr.eventio import Clip, list_clips
from evdvsr.events import (SequenceSample, VoxelGrid, hr_edge_mask,
                           inter_window, segment_events, voxelize)


class ClipCache:
    """One clip fully decoded: frames, stacked voxel grids, masks.

    Voxelization runs once per clip over the full frame; training samples
    slice temporal windows and spatial crops out of these arrays.
    """

    def __init__(self, clip: Clip, num_bins: int, scale: int,
                 need_gt: bool = True, need_masks: bool = True):
        self.name = clip.name
        self.scale = scale
        self.blurry = clip.blurry_lr()
        t, _, h, w = self.blurry.shape
        ev = clip.events_lr()
        if (ev.width, ev.height) != (w, h):
            raise DataError(
                f"{clip.path}: event geometry {ev.width}x{ev.height} does not "
                f"match the {w}x{h} LR frames")
        exposures = clip.exposures
        self.intra_windows = [(float(e.t_start), float(e.t_end))
                              for e in exposures]
        self.inter_windows = [inter_window(a, b)
                              for a, b in zip(exposures, exposures[1:])]
        intra, inter = segment_events(ev, exposures)
        self.intra = np.stack([
            voxelize(intra[i], (exposures[i].t_start, exposures[i].t_end),
                     num_bins, w, h, kind="intra").data
            for i in range(t)]).astype(np.float32)
        self.fwd = np.stack([
            voxelize(inter[i], inter_window(exposures[i], exposures[i + 1]),
                     num_bins, w, h, kind="inter_forward").data
            for i in range(t - 1)]).astype(np.float32)
        self.bwd = np.stack([
            voxelize(inter[i], inter_window(exposures[i], exposures[i + 1]),
                     num_bins, w, h, reverse=True).data
            for i in range(t - 1)]).astype(np.float32)

        self.sharp = None
        self.masks = None
        if need_gt:
            self.sharp = clip.sharp_hr()
            if self.sharp.shape != (t, 3, h * scale, w * scale):
                raise DataError(f"{clip.path}: GT geometry inconsistent with "
                                f"scale {scale}")
        if need_masks:
            ev_hr = clip.events_hr()
            sh, sw = h * scale, w * scale
            if (ev_hr.width, ev_hr.height) != (sw, sh):
                raise DataError(f"{clip.path}: HR event geometry mismatch")
            intra_hr, _ = segment_events(ev_hr, exposures)
            self.masks = np.stack([
                hr_edge_mask(intra_hr[i],
                             (exposures[i].t_start, exposures[i].t_end),
                             sh, sw, num_bins)
                for i in range(t)])

    @property
    def num_frames(self) -> int:
        return self.blurry.shape[0]

    def window(self, t0: int, t_len: int) -> SequenceSample:
        """A temporal sub-clip as a SequenceSample (no copy of pixel data)."""
        if t0 < 0 or t0 + t_len > self.num_frames:
            raise InvalidInputError("window outside clip")
        sl = slice(t0, t0 + t_len)
        sl_inter = slice(t0, t0 + t_len - 1)

        def grids(arr, kind, windows):
            return [VoxelGrid(a, kind, win)
                    for a, win in zip(arr, windows)]

        return SequenceSample(
            blurry_lr=self.blurry[sl],
            intra_voxels=grids(self.intra[sl], "intra",
                               self.intra_windows[sl]),
            fwd_voxels=grids(self.fwd[sl_inter], "inter_forward",
                             self.inter_windows[sl_inter]),
            bwd_voxels=grids(self.bwd[sl_inter], "inter_backward",
                             self.inter_windows[sl_inter]),
            scale=self.scale,
            sharp_hr=self.sharp[sl] if self.sharp is not None else None,
            edge_masks=self.masks[sl] if self.masks is not None else None,
        )

    def full(self) -> SequenceSample:
        return self.window(0, self.num_frames)


class ClipDataset:
    """A set of cached clips with train/val split."""

    def __init__(self, root: str | Path, num_bins: int, scale: int,
                 train_clips: str = "", val_clips: str = "",
                 need_gt: bool = True, need_masks: bool = True):
        clips = list_clips(root)
        val_names = {c for c in val_clips.split(",") if c}
        train_names = {c for c in train_clips.split(",") if c}
        known = {c.name for c in clips}
        for name in val_names | train_names:
            if name not in known:
                raise DataError(f"clip {name!r} not found under {root}")
        self.train = []
        self.val = []
        for clip in clips:
            cache = ClipCache(clip, num_bins, scale, need_gt, need_masks)
            if clip.name in val_names:
                self.val.append(cache)
            elif not train_names or clip.name in train_names:
                self.train.append(cache)
        if not self.train:
            raise DataError("training split is empty")


def sample_to_tensors(sample: SequenceSample, device=None,
                      dtype=torch.float32) -> dict:
    """Stack a SequenceSample into batched (N=1) tensors."""
    def cv(arr):
        return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype,
                               device=device)

    t = sample.num_frames
    out = {
        "frames": cv(sample.blurry_lr).unsqueeze(0),
        "intra": cv(np.stack([v.data for v in sample.intra_voxels])).unsqueeze(0),
    }
    if t > 1:
        out["fwd"] = cv(np.stack([v.data for v in sample.fwd_voxels])).unsqueeze(0)
        out["bwd"] = cv(np.stack([v.data for v in sample.bwd_voxels])).unsqueeze(0)
    else:
        b = sample.intra_voxels[0].bins
        h, w = sample.blurry_lr.shape[-2:]
        out["fwd"] = torch.zeros(1, 0, b, h, w, dtype=dtype, device=device)
        out["bwd"] = torch.zeros(1, 0, b, h, w, dtype=dtype, device=device)
    if sample.sharp_hr is not None:
        out["gt"] = cv(sample.sharp_hr).unsqueeze(0)
    if sample.edge_masks is not None:
        out["masks"] = cv(sample.edge_masks).unsqueeze(0)
    return out


def batch_to_tensors(samples: list[SequenceSample], device=None,
                     dtype=torch.float32) -> dict:
    parts = [sample_to_tensors(s, device, dtype) for s in samples]
    return {k: torch.cat([p[k] for p in parts], dim=0) for k in parts[0]}
