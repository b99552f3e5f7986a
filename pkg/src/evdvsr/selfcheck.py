"""Registered invariant properties and the self-check runner.

Each property is a deterministic check over procedurally generated inputs
with a fixed seed, reporting pass/fail plus the measured tolerance margin.
The ``dcn-clamp`` fault hook (see :mod:`evdvsr.model`) removes the DCN offset
clamp so exactly the offset-bound property fails; it exists to prove the
suite can detect the defect it guards against.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass

import numpy as np
import torch

from evdvsr import metrics as M
from evdvsr import training as T
from evdvsr.config import ModelConfig, TrainConfig
from evdvsr.events import (EventStream, ExposureWindow, segment_events,
                           simulate_events, synthesize_blur, voxelize)
from evdvsr.model import (DCN_MASK_BIAS, EvDeblurVSR, HDAModule,
                          backward_warp, deform_conv)
from evdvsr.resize import upsample_frame


@dataclass
class PropertyResult:
    name: str
    passed: bool
    margin: str


def _random_stream(rng, n, w, h, t_span=10_000) -> EventStream:
    t = np.sort(rng.integers(0, t_span + 1, size=n))
    return EventStream(t, rng.integers(0, w, size=n),
                       rng.integers(0, h, size=n),
                       rng.choice([-1, 1], size=n).astype(np.int8),
                       w, h, 0, t_span)


def _voxel_oracle(ev: EventStream, window, bins, w, h) -> np.ndarray:
    grid = np.zeros((bins, h, w))
    t0, t1 = window
    for x, y, t, p in zip(ev.x, ev.y, ev.t, ev.p):
        ts = (bins - 1) * (t - t0) / (t1 - t0) if bins > 1 else 0.0
        for b in range(bins):
            grid[b, y, x] += p * max(0.0, 1.0 - abs(b - ts))
    return grid


def _tiny_model(seed=0, channels=8, dtype=torch.float32) -> EvDeblurVSR:
    torch.manual_seed(seed)
    cfg = ModelConfig(channels=channels, attention_heads=2, dcn_groups=2,
                      residual_blocks=2)
    return EvDeblurVSR(cfg).to(dtype)


def _tiny_inputs(rng, t=2, hw=8, bins=5, dtype=torch.float32):
    g = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
    mk = lambda *shape: torch.rand(*shape, generator=g).to(dtype)
    return (mk(1, t, 3, hw, hw), mk(1, t, bins, hw, hw) * 0.2,
            mk(1, t - 1, bins, hw, hw) * 0.2, mk(1, t - 1, bins, hw, hw) * 0.2)


# --- events -----------------------------------------------------------------

def check_voxel_mass(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        ev = _random_stream(rng, int(rng.integers(1, 2000)), 16, 12)
        g = voxelize(ev, (0, 10_000), 5, 16, 12)
        worst = max(worst, abs(g.data.sum() - ev.p.sum()))
    return worst <= 1e-5, f"max |sum(V) - sum(p)| = {worst:.2e} (tol 1e-5)"


def check_voxel_oracle(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        ev = _random_stream(rng, int(rng.integers(0, 1500)), 12, 9)
        g = voxelize(ev, (0, 10_000), 5, 12, 9)
        ref = _voxel_oracle(ev, (0, 10_000), 5, 12, 9)
        worst = max(worst, np.abs(g.data - ref).max())
    return worst <= 1e-5, f"max |V - oracle| = {worst:.2e} (tol 1e-5)"


def check_reversal_involution(seed):
    from evdvsr.events import reverse_voxels
    rng = np.random.default_rng(seed)
    ev = _random_stream(rng, 500, 10, 10)
    fwd = voxelize(ev, (0, 10_000), 5, 10, 10)
    back = reverse_voxels(reverse_voxels(fwd))
    exact = np.array_equal(back.data, fwd.data)
    return exact, "double reversal bitwise equal" if exact else "mismatch"


def check_polarity_symmetry(seed):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0.05, 0.95, size=(6, 5, 7))
    ts = np.arange(6) * 1000
    lo, hi = frames.min(), frames.max()
    c = np.log(lo + 1e-3) + np.log(hi + 1e-3)
    inv = np.clip(np.exp(c - np.log(frames + 1e-3)) - 1e-3, 0.0, 1.0)
    a = simulate_events(frames, ts, 0.12)
    b = simulate_events(inv, ts, 0.12)
    key = lambda s, flip: sorted(zip(s.t, s.x, s.y, s.p * (-1 if flip else 1)))
    ok = key(a, False) == key(b, True)
    return ok, f"{len(a)} events mirror exactly" if ok else "event sets differ"


def check_segmentation_partition(seed):
    rng = np.random.default_rng(seed)
    exposures = [ExposureWindow(k * 1000, k * 1000 + 700, k) for k in range(5)]
    ev = _random_stream(rng, 3000, 8, 8, t_span=4700)
    _, inter = segment_events(ev, exposures)
    in_range = int(np.sum((2 * ev.t > exposures[0].mid2)
                          & (2 * ev.t <= exposures[-1].mid2)))
    total = sum(len(sl) for sl in inter)
    # slice intervals are disjoint by construction of the midpoints, so
    # matching totals + per-slice bounds imply each event lands exactly once
    bounds_ok = all(
        len(sl) == 0 or (2 * sl.t.min() > a.mid2 and 2 * sl.t.max() <= b.mid2)
        for sl, a, b in zip(inter, exposures, exposures[1:]))
    ok = bounds_ok and total == in_range
    return bool(ok), (f"{in_range} mid-span events, {total} assigned once"
                      if ok else f"assigned {total} of {in_range}")


def check_blur_permutation(seed):
    rng = np.random.default_rng(seed)
    frames = rng.random((7, 3, 6, 6)).astype(np.float32)
    a = synthesize_blur(frames)
    b = synthesize_blur(frames[rng.permutation(7)])
    ok = np.array_equal(a, b)
    return ok, "mean bitwise permutation-invariant" if ok else "differs"


# --- model ------------------------------------------------------------------

def check_identity_at_init(seed):
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed)
    frames, intra, fwd, bwd = _tiny_inputs(rng, t=3, hw=8)
    with torch.no_grad():
        out = model(frames, intra, fwd, bwd)
    ref = torch.stack([upsample_frame(frames[0, t], model.config.scale)
                       for t in range(3)]).unsqueeze(0)
    ok = torch.equal(out, ref)
    return bool(ok), "forward == bicubic bitwise" if ok else \
        f"max diff {(out - ref).abs().max():.2e}"


def check_softmax_normalization(seed):
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 8, 6, 6, generator=g)
    y = torch.randn(2, 8, 6, 6, generator=g)
    with torch.no_grad():
        _, attn_cab = model.rfd.cab_frame(x, return_attn=True)
        _, attn_cma = model.rfd.attn_i2e(x, y, return_attn=True)
        _, scores = model.hda_forward.ega(x, y, return_scores=True)
    worst = max(float((attn_cab.sum(-1) - 1).abs().max()),
                float((attn_cma.sum(-1) - 1).abs().max()),
                float((scores.sum(1) - 1).abs().max()))
    return worst <= 1e-6, f"max |sum - 1| = {worst:.2e} (tol 1e-6)"


def check_full_gradient(seed):
    """Central-difference check of d(loss)/d(theta) on a tiny double model.

    Every parameter tensor is probed at a bounded random subset of entries.
    """
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    frames, intra, fwd, bwd = _tiny_inputs(rng, t=2, hw=8,
                                           dtype=torch.float64)
    gt = torch.rand(1, 2, 3, 32, 32, generator=torch.Generator().manual_seed(1),
                    dtype=torch.float64)
    masks = torch.rand_like(gt)
    tc = TrainConfig(total_iters=1, crop_size=32)

    def loss_value():
        pred = model(frames, intra, fwd, bwd)
        l_r, l_e = T.compute_losses(pred, gt, masks, tc)
        return l_r + l_e

    loss = loss_value()
    loss.backward()
    eps = 1e-6
    worst = 0.0
    for p in model.parameters():
        flat = p.detach().reshape(-1)
        gflat = (p.grad if p.grad is not None
                 else torch.zeros_like(p)).reshape(-1)
        idx = rng.choice(flat.numel(), size=min(3, flat.numel()),
                         replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                hi = loss_value().item()
                flat[i] = orig - eps
                lo = loss_value().item()
                flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            g = gflat[i].item()
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-4)
            worst = max(worst, rel)
    return worst <= 1e-2, f"max rel grad err = {worst:.2e} (tol 1e-2)"


def check_dcn_degeneracy(seed):
    g = torch.Generator().manual_seed(seed)
    feat = torch.randn(2, 8, 9, 9, generator=g, dtype=torch.float64)
    weight = torch.randn(8, 8, 3, 3, generator=g, dtype=torch.float64)
    bias = torch.randn(8, generator=g, dtype=torch.float64)
    off = torch.zeros(2, 2, 9, 9, 9, dtype=torch.float64)
    mask = torch.ones(2, 2, 9, 9, 9, dtype=torch.float64)
    out = deform_conv(feat, off, off, mask, weight, bias)
    ref = torch.nn.functional.conv2d(feat, weight, bias, padding=1)
    diff = float((out - ref).abs().max())
    return diff <= 1e-5, f"max |DCN - conv| = {diff:.2e} (tol 1e-5)"


def check_dcn_offset_bound(seed):
    g = torch.Generator().manual_seed(seed)
    hda = HDAModule(8, 2, offset_clamp=10.0).double()
    with torch.no_grad():
        hda.offset_conv.weight.fill_(3.0)     # force huge raw residuals
        hda.offset_conv.bias.fill_(25.0)
    h = torch.randn(1, 8, 8, 8, generator=g, dtype=torch.float64)
    voxel = torch.randn(1, 8, 8, 8, generator=g, dtype=torch.float64)
    flow = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    fe = torch.randn(1, 8, 8, 8, generator=g, dtype=torch.float64)
    fi = torch.randn(1, 8, 8, 8, generator=g, dtype=torch.float64)
    with torch.no_grad():
        _, internals = hda(h, voxel, flow, fe, fi, return_offsets=True)
    res_x = internals["off_x"] - internals["flow"][:, 0].reshape(1, 1, 1, 8, 8)
    res_y = internals["off_y"] - internals["flow"][:, 1].reshape(1, 1, 1, 8, 8)
    worst = float(torch.max(res_x.abs().max(), res_y.abs().max()))
    ok = worst <= hda.offset_clamp + 1e-9
    return ok, f"max |offset - flow| = {worst:.2f} (clamp {hda.offset_clamp})"


def check_forward_determinism(seed):
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed)
    frames, intra, fwd, bwd = _tiny_inputs(rng, t=2, hw=8)
    with torch.no_grad():
        a = model(frames, intra, fwd, bwd)
        b = model(frames, intra, fwd, bwd)
    ok = torch.equal(a, b)
    return bool(ok), "repeat forward bitwise equal" if ok else "nondeterministic"


# --- training ---------------------------------------------------------------

def check_loss_e_monotone(seed):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(1, 2, 3, 6, 6, generator=g)
    gt = torch.rand(1, 2, 3, 6, 6, generator=g)
    masks = torch.rand(1, 2, 3, 6, 6, generator=g) * 0.5
    base = float(T.loss_e(pred, gt, masks))
    bumped = masks.clone()
    bumped[0, 0, 0, 2, 3] += 0.4
    delta = float(T.loss_e(pred, gt, bumped)) - base
    return delta >= 0.0, f"delta L_e = {delta:+.2e} (must be >= 0)"


def check_loss_e_l1_limit(seed):
    g = torch.Generator().manual_seed(seed)
    diff = torch.rand(1, 1, 3, 5, 5, generator=g) * 0.5 + 0.1
    gt = torch.zeros_like(diff)
    masks = torch.ones_like(diff)
    le = float(T.loss_e(diff, gt, masks))
    l1 = float(diff.abs().mean())
    rel = abs(le - l1) / l1
    return rel <= 1e-6, f"|L_e - masked L1| rel = {rel:.2e} (tol 1e-6)"


def check_loss_e_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    pred = (torch.rand(1, 1, 3, 4, 4, generator=g, dtype=torch.float64)
            * 0.5 + 0.25).requires_grad_(True)
    gt = torch.zeros_like(pred)
    masks = torch.rand(1, 1, 3, 4, 4, generator=g, dtype=torch.float64)
    T.loss_e(pred, gt, masks).backward()
    eps = 1e-6
    worst = 0.0
    flat = pred.detach().reshape(-1)
    gflat = pred.grad.reshape(-1)
    for i in range(0, flat.numel(), 7):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            hi = float(T.loss_e(pred, gt, masks))
            flat[i] = orig - eps
            lo = float(T.loss_e(pred, gt, masks))
            flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        rel = abs(fd - gflat[i].item()) / max(abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst <= 1e-4, f"max rel grad err = {worst:.2e} (tol 1e-4)"


def check_mse_flip_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(2, 3, 6, 6, generator=g)
    gt = torch.rand(2, 3, 6, 6, generator=g)
    a = T.loss_r(pred, gt)
    b = T.loss_r(torch.flip(pred, [-1]), torch.flip(gt, [-1]))
    ok = torch.equal(a, b)
    return bool(ok), "MSE exactly flip-invariant" if ok else f"{a}!={b}"


def check_checkpoint_roundtrip(seed):
    model = _tiny_model(seed)
    opt = T.make_optimizer(model, TrainConfig(total_iters=10))
    rng = np.random.default_rng(seed)
    frames, intra, fwd, bwd = _tiny_inputs(rng, t=2, hw=8)
    gt = torch.rand(1, 2, 3, 32, 32)
    masks = torch.rand_like(gt)
    batch = {"frames": frames, "intra": intra, "fwd": fwd, "bwd": bwd,
             "gt": gt, "masks": masks}
    T.train_step(model, batch, opt, 0, TrainConfig(total_iters=10,
                                                   crop_size=32))
    buf = io.BytesIO()
    torch.save({"state": model.state_dict(), "opt": opt.state_dict()}, buf)
    buf.seek(0)
    saved = torch.load(buf, weights_only=False)
    clone = _tiny_model(seed + 1)
    clone.load_state_dict(saved["state"])
    ok = all(torch.equal(a, b) for a, b in
             zip(model.state_dict().values(), clone.state_dict().values()))
    opt2 = T.make_optimizer(clone, TrainConfig(total_iters=10))
    opt2.load_state_dict(saved["opt"])
    for sa, sb in zip(opt.state_dict()["state"].values(),
                      opt2.state_dict()["state"].values()):
        for k in sa:
            va, vb = sa[k], sb[k]
            if torch.is_tensor(va):
                ok = ok and torch.equal(va, vb)
            else:
                ok = ok and va == vb
    return bool(ok), "parameters and optimizer state bitwise equal" if ok \
        else "round-trip mismatch"


# --- metrics ----------------------------------------------------------------

def check_metric_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 16, 16))
    b = rng.random((3, 16, 16))
    dp = abs(M.psnr(a, b) - M.psnr(b, a))
    ds = abs(M.ssim(a, b) - M.ssim(b, a))
    worst = max(dp, ds)
    return worst <= 1e-9, f"max asymmetry = {worst:.2e}"


def check_metric_self_identity(seed):
    rng = np.random.default_rng(seed)
    clip = rng.random((3, 3, 24, 24))
    t = M.tof(clip, clip)
    c = M.tcc(clip, clip)
    ok = t == 0.0 and abs(c - 1.0) <= 1e-12
    return ok, f"tof(x,x)={t:.2e}, tcc(x,x)={c:.12f}"


def check_metric_flip_invariance(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((2, 3, 16, 16))
    gt = rng.random((2, 3, 16, 16))
    fp = pred[..., ::-1].copy()
    fg = gt[..., ::-1].copy()
    worst = max(
        abs(M.psnr(pred, gt) - M.psnr(fp, fg)),
        abs(M.ssim(pred[0], gt[0]) - M.ssim(fp[0], fg[0])),
        abs(M.tof(pred, gt) - M.tof(fp, fg)),
        abs(M.tcc(pred, gt) - M.tcc(fp, fg)),
    )
    return worst <= 1e-9, f"max flip deviation = {worst:.2e}"


def check_metric_aggregation(seed):
    rng = np.random.default_rng(seed)
    rep = M.MetricReport()
    for i in range(4):
        rep.add(M.ClipMetrics(f"c{i}", rng.uniform(20, 40), rng.uniform(0, 1),
                              rng.uniform(0, 3), rng.uniform(0, 1),
                              int(rng.integers(2, 20))))
    agg = rep.aggregate()
    want = np.mean([r.psnr for r in rep.rows])
    diff = abs(agg.psnr - want)
    return diff <= 1e-9, f"|aggregate - mean| = {diff:.2e}"


PROPERTIES = [
    ("events/voxel-mass-conservation", check_voxel_mass),
    ("events/voxelize-oracle-equivalence", check_voxel_oracle),
    ("events/time-reversal-involution", check_reversal_involution),
    ("events/simulator-polarity-symmetry", check_polarity_symmetry),
    ("events/segmentation-partition", check_segmentation_partition),
    ("events/blur-permutation-invariance", check_blur_permutation),
    ("model/identity-at-init", check_identity_at_init),
    ("model/softmax-normalization", check_softmax_normalization),
    ("model/full-gradient-check", check_full_gradient),
    ("model/dcn-degeneracy", check_dcn_degeneracy),
    ("model/dcn-offset-bound", check_dcn_offset_bound),
    ("model/forward-determinism", check_forward_determinism),
    ("training/loss-e-mask-monotonicity", check_loss_e_monotone),
    ("training/loss-e-l1-limit", check_loss_e_l1_limit),
    ("training/loss-e-gradient", check_loss_e_gradient),
    ("training/mse-flip-invariance", check_mse_flip_invariance),
    ("training/checkpoint-roundtrip", check_checkpoint_roundtrip),
    ("metrics/psnr-ssim-symmetry", check_metric_symmetry),
    ("metrics/self-identity", check_metric_self_identity),
    ("metrics/flip-invariance", check_metric_flip_invariance),
    ("metrics/aggregation-mean", check_metric_aggregation),
]


def run_selfcheck(seed: int = 0) -> list[PropertyResult]:
    results = []
    for name, fn in PROPERTIES:
        try:
            passed, margin = fn(seed)
        except Exception as e:  # a crashed property is a failed property
            passed, margin = False, f"raised {type(e).__name__}: {e}"
        results.append(PropertyResult(name, bool(passed), margin))
    return results


def format_results(results: list[PropertyResult]) -> str:
    width = max(len(r.name) for r in results) + 2
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}{status}  {r.margin}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results)} properties, {n_fail} failed")
    return "\n".join(lines) + "\n"
