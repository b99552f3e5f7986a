import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from evdvsr.errors import InvalidInputError
from evdvsr.metrics import (SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
                            ClipMetrics, MetricReport, psnr, psnr_saturated,
                            ssim, tcc, tof)


def textured(rng, h, w):
    img = gaussian_filter(rng.random((h, w)), 1.2)
    return (img - img.min()) / (img.max() - img.min())


def sliding_window_ssim_oracle(a, b):
    """Direct per-window SSIM evaluation with explicit Gaussian weights."""
    half = SSIM_WINDOW // 2
    xs = np.arange(SSIM_WINDOW) - half
    w1 = np.exp(-(xs ** 2) / (2 * SSIM_SIGMA ** 2))
    w1 /= w1.sum()
    win = np.outer(w1, w1)
    h, w = a.shape
    vals = []
    for y in range(half, h - half):
        for x in range(half, w - half):
            pa = a[y - half:y + half + 1, x - half:x + half + 1]
            pb = b[y - half:y + half + 1, x - half:x + half + 1]
            mu_a = (win * pa).sum()
            mu_b = (win * pb).sum()
            var_a = (win * pa * pa).sum() - mu_a ** 2
            var_b = (win * pb * pb).sum() - mu_b ** 2
            cov = (win * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                        / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1)
                           * (var_a + var_b + SSIM_C2)))
    return float(np.mean(vals))


class TestPSNR:
    def test_identical_saturates_at_cap(self):
        x = np.random.default_rng(0).random((3, 8, 8))
        val = psnr(x, x)
        assert val == 99.0
        assert psnr_saturated(val)

    def test_uniform_diff(self):
        gt = np.full((3, 8, 8), 0.4)
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)

    def test_matches_brute_force_oracle(self, rng):
        pred = rng.random((3, 6, 6))
        gt = rng.random((3, 6, 6))
        acc = 0.0
        for a, b in zip(pred.ravel(), gt.ravel()):
            acc += (a - b) ** 2
        want = 10 * math.log10(1.0 / (acc / pred.size))
        assert psnr(pred, gt) == pytest.approx(want, abs=1e-6)

    def test_symmetry(self, rng):
        a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_and_range_validation(self):
        with pytest.raises(InvalidInputError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))
        with pytest.raises(InvalidInputError):
            psnr(np.full((3, 4, 4), 1.5), np.zeros((3, 4, 4)))


class TestSSIM:
    def test_identical_is_exactly_one(self, rng):
        x = rng.random((3, 16, 16))
        assert ssim(x, x) == 1.0

    def test_anticorrelated_binary_is_negative(self):
        rng = np.random.default_rng(0)
        img = (rng.random((16, 16)) > 0.5).astype(np.float64)
        assert ssim(1.0 - img, img) < 0.0

    def test_matches_sliding_window_oracle(self, rng):
        a = rng.random((14, 14))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(sliding_window_ssim_oracle(a, b),
                                           abs=1e-6)

    def test_symmetry(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_rejected(self):
        with pytest.raises(InvalidInputError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_bounded_by_one(self, rng):
        a = rng.random((3, 16, 16))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        assert ssim(a, b) <= 1.0


class TestTOF:
    def test_identical_clips_zero(self, rng):
        clip = rng.random((3, 3, 24, 24))
        assert tof(clip, clip) == 0.0

    def test_static_pred_vs_translating_gt(self, rng):
        base = textured(rng, 90, 140)
        frames = np.stack([np.repeat(base[None, :72, 4 + 2 * k:76 + 2 * k],
                                     3, axis=0) for k in range(3)])
        pred = np.repeat(frames[0][None], 3, axis=0)
        val = tof(pred, frames)
        assert val == pytest.approx(2.0, abs=0.5)

    def test_shuffled_pred_is_worse(self, rng):
        base = textured(rng, 80, 120)
        frames = np.stack([np.repeat(base[None, :64, 2 * k:96 + 2 * k],
                                     3, axis=0) for k in range(4)])
        ident = tof(frames, frames)
        shuffled = tof(frames[[1, 0, 3, 2]], frames)
        assert shuffled > ident

    def test_short_clip_rejected(self):
        with pytest.raises(InvalidInputError):
            tof(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 16)))


class TestTCC:
    def test_identical_is_one(self, rng):
        clip = rng.random((4, 3, 20, 20))
        assert tcc(clip, clip) == pytest.approx(1.0, abs=1e-12)

    def test_static_pred_scores_below_identity(self, rng):
        base = textured(rng, 60, 90)
        gt = np.stack([np.repeat(base[None, :48, 3 * k:64 + 3 * k], 3, axis=0)
                       for k in range(3)])
        static = np.repeat(gt[0][None], 3, axis=0)
        assert tcc(static, gt) < tcc(gt, gt)
        assert tcc(static, gt) < 0.9

    def test_constant_offset_invariance(self, rng):
        clip = rng.random((3, 3, 20, 20)) * 0.6 + 0.1
        gt = rng.random((3, 3, 20, 20)) * 0.6 + 0.1
        shifted = clip + 0.125
        assert tcc(shifted, gt) == pytest.approx(tcc(clip, gt), abs=1e-7)

    def test_short_clip_rejected(self):
        with pytest.raises(InvalidInputError):
            tcc(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 16)))


class TestReport:
    def make_report(self):
        rep = MetricReport()
        rep.add(ClipMetrics("clip_a", 30.0, 0.9, 1.0, 0.8, 10))
        rep.add(ClipMetrics("clip_b", 34.0, 0.95, 0.5, 0.9, 30))
        return rep

    def test_aggregate_is_mean_of_clips(self):
        agg = self.make_report().aggregate()
        assert agg.psnr == pytest.approx(32.0)
        assert agg.ssim == pytest.approx(0.925)
        assert agg.clip == "ALL"

    def test_frame_weighted_flag(self):
        agg = self.make_report().aggregate(frame_weighted=True)
        assert agg.psnr == pytest.approx((30 * 10 + 34 * 30) / 40)

    def test_machine_lines_roundtrip(self):
        from evdvsr.report import parse_metric_lines
        rep = self.make_report()
        text = rep.machine_lines()
        import pathlib, tempfile
        with tempfile.TemporaryDirectory() as d:
            p = pathlib.Path(d) / "metrics.csv"
            p.write_text(text)
            rows = parse_metric_lines(p)
        assert [r[0] for r in rows] == ["clip_a", "clip_b", "ALL"]
        assert rows[0][1] == pytest.approx(30.0)

    def test_table_contains_all_row(self):
        table = self.make_report().table()
        assert "ALL" in table and "clip_a" in table

    def test_flip_invariance_of_all_metrics(self, rng):
        pred = rng.random((2, 3, 16, 16))
        gt = rng.random((2, 3, 16, 16))
        fp, fg = pred[..., ::-1].copy(), gt[..., ::-1].copy()
        assert psnr(pred, gt) == pytest.approx(psnr(fp, fg), abs=1e-12)
        assert ssim(pred[0], gt[0]) == pytest.approx(ssim(fp[0], fg[0]),
                                                     abs=1e-9)
        assert tof(pred, gt) == pytest.approx(tof(fp, fg), abs=1e-9)
        assert tcc(pred, gt) == pytest.approx(tcc(fp, fg), abs=1e-9)
