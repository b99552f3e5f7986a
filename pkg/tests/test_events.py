import numpy as np
import pytest

from evdvsr.errors import DataError, InvalidInputError
from evdvsr.events import (LOG_EPS, EventStream, ExposureWindow,
                           build_sequence_sample, downsample_bicubic,
                           hr_edge_mask, inter_window, reverse_voxels,
                           segment_events, simulate_events, synthesize_blur,
                           voxelize)

THETA = 0.15


def scalar_crossing_oracle(frames, timestamps, theta):
    """Per-pixel reference enumerator for the threshold simulator."""
    n, h, w = frames.shape
    log_i = np.log(frames + LOG_EPS)
    out = []
    for y in range(h):
        for x in range(w):
            ref = log_i[0, y, x]
            for k in range(1, n):
                prev, curr = log_i[k - 1, y, x], log_i[k, y, x]
                sign = 1 if curr >= ref else -1
                count = int(np.floor(abs(curr - ref) / theta))
                for j in range(1, count + 1):
                    level = ref + sign * j * theta
                    denom = curr - prev
                    frac = (level - prev) / denom if denom != 0 else 1.0
                    frac = min(max(frac, 0.0), 1.0)
                    t = int(np.rint(timestamps[k - 1] + frac
                                    * (timestamps[k] - timestamps[k - 1])))
                    out.append((t, x, y, sign))
                ref += sign * count * theta
    return sorted(out)


def dense_voxel_oracle(ev, window, bins, w, h):
    grid = np.zeros((bins, h, w))
    t0, t1 = window
    for x, y, t, p in zip(ev.x, ev.y, ev.t, ev.p):
        ts = (bins - 1) * (t - t0) / (t1 - t0) if bins > 1 else 0.0
        for b in range(bins):
            grid[b, y, x] += p * max(0.0, 1.0 - abs(b - ts))
    return grid


def random_stream(rng, n, w=12, h=10, span=10_000):
    t = np.sort(rng.integers(0, span + 1, size=n))
    return EventStream(t, rng.integers(0, w, size=n),
                       rng.integers(0, h, size=n),
                       rng.choice([-1, 1], size=n).astype(np.int8),
                       w, h, 0, span)


class TestSimulateEvents:
    def test_constant_sequence_emits_nothing(self):
        frames = np.full((5, 4, 4), 0.5)
        ev = simulate_events(frames, np.arange(5) * 1000, THETA)
        assert len(ev) == 0

    def test_step_of_2p5_theta_gives_two_positive_events(self):
        i0 = 0.2
        l1 = np.log(i0 + LOG_EPS) + 2.5 * THETA
        i1 = np.exp(l1) - LOG_EPS
        frames = np.array([[[i0]], [[i1]]])
        ev = simulate_events(frames, [0, 1000], THETA)
        assert len(ev) == 2
        assert np.all(ev.p == 1)
        assert np.all((ev.x == 0) & (ev.y == 0))
        # crossings at 1.0 and 2.0 theta out of a 2.5 theta ramp
        assert list(ev.t) == [400, 800]

    def test_matches_scalar_oracle_on_random_frames(self, rng):
        frames = rng.uniform(0.05, 0.95, size=(6, 5, 7))
        ts = np.arange(6) * 997
        ev = simulate_events(frames, ts, THETA)
        got = sorted(zip(ev.t, ev.x, ev.y, ev.p))
        want = scalar_crossing_oracle(frames, ts, THETA)
        assert [tuple(map(int, e)) for e in got] == want

    def test_moving_square_emits_only_on_edges(self):
        h = w = 20
        frames = np.full((4, h, w), 0.1)
        for k in range(4):
            frames[k, 7:13, 4 + k:10 + k] = 0.9
        ev = simulate_events(frames, np.arange(4) * 1000, THETA)
        assert len(ev) > 0
        # pixels covered by the square in every frame never change intensity
        changed = np.zeros((h, w), dtype=bool)
        for k in range(1, 4):
            changed |= frames[k] != frames[k - 1]
        for x, y in zip(ev.x, ev.y):
            assert changed[y, x]

    def test_polarity_symmetry_under_log_inversion(self, rng):
        frames = rng.uniform(0.05, 0.95, size=(5, 6, 6))
        ts = np.arange(5) * 1000
        c = np.log(frames.min() + LOG_EPS) + np.log(frames.max() + LOG_EPS)
        inv = np.clip(np.exp(c - np.log(frames + LOG_EPS)) - LOG_EPS, 0, 1)
        a = simulate_events(frames, ts, THETA)
        b = simulate_events(inv, ts, THETA)
        assert sorted(zip(a.t, a.x, a.y, a.p)) \
            == sorted(zip(b.t, b.x, b.y, -b.p))

    def test_input_validation(self):
        with pytest.raises(InvalidInputError):
            simulate_events(np.zeros((1, 4, 4)), [0], THETA)
        with pytest.raises(InvalidInputError):
            simulate_events(np.zeros((2, 4, 4)), [0, 1], 0.0)
        with pytest.raises(InvalidInputError):
            simulate_events(np.full((2, 4, 4), 1.5), [0, 1], THETA)

    def test_output_sorted_and_in_range(self, rng):
        frames = rng.uniform(0, 1, size=(8, 6, 6))
        ts = np.arange(8) * 500
        ev = simulate_events(frames, ts, THETA)
        assert np.all(np.diff(ev.t) >= 0)
        assert len(ev) == 0 or (ev.t[0] >= 0 and ev.t[-1] <= 3500)


class TestSynthesizeBlur:
    def test_identical_frames(self):
        frame = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
        out = synthesize_blur(np.stack([frame] * 5))
        assert np.array_equal(out, frame)

    def test_zero_and_one(self):
        frames = np.stack([np.zeros((3, 4, 4)), np.ones((3, 4, 4))])
        assert np.array_equal(synthesize_blur(frames),
                              np.full((3, 4, 4), 0.5, dtype=np.float32))

    def test_moving_edge_ramp_matches_mean_oracle(self):
        frames = np.zeros((7, 1, 1, 14), dtype=np.float32)
        for k in range(7):
            frames[k, ..., : 4 + k] = 1.0
        out = synthesize_blur(frames[:, 0])
        want = frames[:, 0].astype(np.float64).mean(axis=0)
        assert np.abs(out - want).max() < 1e-7
        # ramp profile across the blur extent
        profile = out[0]
        assert np.all(np.diff(profile) <= 0)
        assert profile[0] == 1.0 and profile[-1] == 0.0

    def test_permutation_invariance(self, rng):
        frames = rng.random((9, 3, 5, 5)).astype(np.float32)
        perm = rng.permutation(9)
        assert np.array_equal(synthesize_blur(frames),
                              synthesize_blur(frames[perm]))

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            synthesize_blur(np.zeros((0, 3, 4, 4)))


class TestSegmentEvents:
    def exposures(self):
        return [ExposureWindow(k * 1000, k * 1000 + 600, k) for k in range(3)]

    def test_all_outside_gives_empty_slices(self):
        # events in the gaps between exposures and outside the mid-span
        ev = EventStream(np.array([700, 800, 2900]), np.zeros(3, int),
                         np.zeros(3, int), np.ones(3, np.int8), 4, 4, 0, 3000)
        intra, inter = segment_events(ev, self.exposures())
        assert all(len(s) == 0 for s in intra)
        # 700/800 fall into the first inter interval (300, 1300]
        assert len(inter[0]) == 2 and len(inter[1]) == 0

    def test_midpoint_boundary_convention(self):
        # mid(T_1) = 1300: intra member, right boundary of inter 0->1,
        # excluded from inter 1->2
        ev = EventStream(np.array([1300]), np.array([0]), np.array([0]),
                        np.array([1], dtype=np.int8), 4, 4, 0, 3000)
        intra, inter = segment_events(ev, self.exposures())
        assert len(intra[1]) == 1
        assert len(inter[0]) == 1
        assert len(inter[1]) == 0

    def test_uniform_events_proportional_counts(self):
        exposures = self.exposures()
        t = np.arange(0, 3001)            # one event per microsecond
        ev = EventStream(t, np.zeros_like(t), np.zeros_like(t),
                         np.ones(len(t), np.int8), 4, 4, 0, 3000)
        intra, inter = segment_events(ev, exposures)
        for w, sl in zip(exposures, intra):
            assert abs(len(sl) - (w.t_end - w.t_start + 1)) <= 1
        for a, b, sl in zip(exposures, exposures[1:], inter):
            assert abs(len(sl) - (b.mid - a.mid)) <= 1

    def test_partition_of_mid_span(self, rng):
        exposures = self.exposures()
        ev = random_stream(rng, 2000, w=4, h=4, span=3000)
        _, inter = segment_events(ev, exposures)
        lo, hi = exposures[0].mid2, exposures[-1].mid2
        in_span = int(np.sum((2 * ev.t > lo) & (2 * ev.t <= hi)))
        assert sum(len(s) for s in inter) == in_span

    def test_overlapping_exposures_rejected(self):
        bad = [ExposureWindow(0, 1000, 0), ExposureWindow(1000, 2000, 1)]
        ev = EventStream(np.array([5]), np.array([0]), np.array([0]),
                         np.array([1], np.int8), 4, 4, 0, 3000)
        with pytest.raises(InvalidInputError):
            segment_events(ev, bad)


class TestVoxelize:
    def test_empty_slice_gives_zero_grid(self):
        ev = EventStream(np.empty(0, int), np.empty(0, int),
                         np.empty(0, int), np.empty(0, np.int8), 8, 6, 0, 100)
        g = voxelize(ev, (0, 100), 5, 8, 6)
        assert g.data.shape == (5, 6, 8)
        assert np.all(g.data == 0)

    def test_event_at_window_start_lands_in_bin_zero(self):
        ev = EventStream(np.array([0]), np.array([3]), np.array([2]),
                         np.array([1], np.int8), 8, 6, 0, 100)
        g = voxelize(ev, (0, 100), 5, 8, 6)
        assert g.data[0, 2, 3] == 1.0
        assert g.data.sum() == 1.0

    def test_event_at_37_percent(self):
        # t* = 4 * 0.37 = 1.48 -> bin 1 gets 0.52, bin 2 gets 0.48
        ev = EventStream(np.array([37]), np.array([1]), np.array([0]),
                         np.array([1], np.int8), 4, 2, 0, 100)
        g = voxelize(ev, (0, 100), 5, 4, 2)
        assert g.data[1, 0, 1] == pytest.approx(0.52, abs=1e-12)
        assert g.data[2, 0, 1] == pytest.approx(0.48, abs=1e-12)
        assert np.abs(g.data).sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_dense_oracle(self, rng):
        for _ in range(10):
            ev = random_stream(rng, int(rng.integers(0, 2000)))
            g = voxelize(ev, (0, 10_000), 5, 12, 10)
            ref = dense_voxel_oracle(ev, (0, 10_000), 5, 12, 10)
            assert np.abs(g.data - ref).max() <= 1e-5

    def test_mass_conservation(self, rng):
        for _ in range(10):
            ev = random_stream(rng, int(rng.integers(1, 5000)))
            g = voxelize(ev, (0, 10_000), 5, 12, 10)
            assert abs(g.data.sum() - ev.p.sum()) <= 1e-5

    def test_reverse_is_mirrored_negated_forward(self, rng):
        ev = random_stream(rng, 700)
        fwd = voxelize(ev, (0, 10_000), 5, 12, 10, kind="inter_forward")
        bwd = voxelize(ev, (0, 10_000), 5, 12, 10, reverse=True)
        assert np.array_equal(bwd.data, -fwd.data[::-1])

    def test_double_reversal_is_involution(self, rng):
        ev = random_stream(rng, 400)
        fwd = voxelize(ev, (0, 10_000), 5, 12, 10, kind="inter_forward")
        assert np.array_equal(reverse_voxels(reverse_voxels(fwd)).data,
                              fwd.data)

    def test_single_bin_collapses_time(self, rng):
        ev = random_stream(rng, 100)
        g = voxelize(ev, (0, 10_000), 1, 12, 10)
        assert g.data.shape == (1, 10, 12)
        assert abs(g.data.sum() - ev.p.sum()) <= 1e-9

    def test_zero_length_window_rejected(self):
        ev = random_stream(np.random.default_rng(0), 5)
        with pytest.raises(InvalidInputError):
            voxelize(ev, (50, 50), 5, 12, 10)

    def test_horizontal_flip_commutes(self, rng):
        ev = random_stream(rng, 900)
        flipped = EventStream(ev.t, ev.width - 1 - ev.x, ev.y, ev.p,
                              ev.width, ev.height, ev.t_min, ev.t_max)
        a = voxelize(flipped, (0, 10_000), 5, 12, 10)
        b = voxelize(ev, (0, 10_000), 5, 12, 10)
        assert np.array_equal(a.data, b.data[:, :, ::-1])


class TestHrEdgeMask:
    def test_no_events_gives_zero_mask(self):
        ev = EventStream(np.empty(0, int), np.empty(0, int),
                         np.empty(0, int), np.empty(0, np.int8), 8, 8, 0, 10)
        mask = hr_edge_mask(ev, (0, 10), 8, 8)
        assert mask.shape == (3, 8, 8)
        assert np.all(mask == 0)

    def test_single_pixel_self_normalizes_to_one(self):
        ev = EventStream(np.array([5, 7]), np.array([3, 3]),
                         np.array([2, 2]), np.array([1, 1], np.int8),
                         8, 8, 0, 10)
        mask = hr_edge_mask(ev, (0, 10), 8, 8)
        assert mask[0, 2, 3] == 1.0
        assert mask.sum() == 3.0   # replicated to three channels

    def test_mixed_polarity_matches_accumulation_oracle(self, rng):
        ev = random_stream(rng, 500, w=8, h=8)
        mask = hr_edge_mask(ev, (0, 10_000), 8, 8, num_bins=5)
        signed = dense_voxel_oracle(ev, (0, 10_000), 5, 8, 8).sum(axis=0)
        want = np.abs(signed) / np.abs(signed).max()
        assert np.abs(mask[0] - want).max() <= 1e-6
        assert mask.min() >= 0.0 and mask.max() <= 1.0


class TestBuildSequenceSample:
    def make_clip(self, moving=True, n_frames=3, subs=8):
        total = n_frames * subs + 1
        h = w = 32
        frames = np.full((total, 3, h, w), 0.2, dtype=np.float32)
        for k in range(total):
            off = (k // 2) if moving else 0
            frames[k, :, 10:20, 4 + off:14 + off] = 0.85
        ts = np.arange(total) * 250
        exposures = [ExposureWindow(i * subs * 250, i * subs * 250 + 1500, i)
                     for i in range(n_frames)]
        return frames, ts, exposures

    def test_static_scene(self):
        frames, ts, exposures = self.make_clip(moving=False)
        s = build_sequence_sample(frames, ts, exposures, scale=4,
                                  num_bins=5, theta=THETA)
        want = downsample_bicubic(frames[0], 4)
        for t in range(s.num_frames):
            assert np.array_equal(s.blurry_lr[t], want)
        assert all(np.all(v.data == 0) for v in s.intra_voxels)
        assert all(np.all(v.data == 0) for v in s.fwd_voxels)
        assert np.all(s.edge_masks == 0)

    def test_shapes_and_kinds(self):
        frames, ts, exposures = self.make_clip(n_frames=2)
        s = build_sequence_sample(frames, ts, exposures, scale=4,
                                  num_bins=5, theta=THETA)
        assert s.blurry_lr.shape == (2, 3, 8, 8)
        assert s.sharp_hr.shape == (2, 3, 32, 32)
        assert len(s.intra_voxels) == 2
        assert len(s.fwd_voxels) == len(s.bwd_voxels) == 1
        assert s.intra_voxels[0].data.shape == (5, 8, 8)
        assert s.fwd_voxels[0].kind == "inter_forward"
        assert s.bwd_voxels[0].kind == "inter_backward"

    def test_backward_equals_reversed_forward(self):
        frames, ts, exposures = self.make_clip(n_frames=3)
        s = build_sequence_sample(frames, ts, exposures, scale=4,
                                  num_bins=5, theta=THETA)
        for f, b in zip(s.fwd_voxels, s.bwd_voxels):
            assert np.array_equal(b.data, -f.data[::-1])

    def test_short_clip_rejected(self):
        frames, ts, exposures = self.make_clip()
        with pytest.raises(InvalidInputError):
            build_sequence_sample(frames[:4], ts[:4], exposures, scale=4)


class TestEventIO:
    def test_binary_roundtrip(self, rng, tmp_path):
        from evdvsr.eventio import read_events_bin, write_events_bin
        ev = random_stream(rng, 1000, w=100, h=80)
        path = tmp_path / "events.bin"
        write_events_bin(ev, path)
        back = read_events_bin(path)
        assert np.array_equal(back.t, ev.t)
        assert np.array_equal(back.x, ev.x)
        assert np.array_equal(back.y, ev.y)
        assert np.array_equal(back.p, ev.p)
        assert (back.width, back.height) == (100, 80)

    def test_header_layout(self, rng, tmp_path):
        from evdvsr.eventio import write_events_bin
        ev = random_stream(rng, 3, w=10, h=10)
        path = tmp_path / "events.bin"
        write_events_bin(ev, path)
        raw = path.read_bytes()
        assert raw[:6] == b"EVDV1\n"
        assert len(raw) == 16 + 12 + 9 * 3     # header + geometry + records

    def test_csv_roundtrip(self, rng, tmp_path):
        from evdvsr.eventio import read_events_csv, write_events_csv
        ev = random_stream(rng, 500, w=30, h=20)
        path = tmp_path / "events.csv"
        write_events_csv(ev, path)
        back = read_events_csv(path, 30, 20)
        assert np.array_equal(back.t, ev.t)
        assert np.array_equal(back.x, ev.x)
        assert np.array_equal(back.y, ev.y)
        assert np.array_equal(back.p, ev.p)

    def test_corrupt_header_rejected(self, tmp_path):
        from evdvsr.eventio import read_events_bin
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTEVDV" + b"\x00" * 30)
        with pytest.raises(DataError):
            read_events_bin(path)

    def test_exposures_roundtrip(self, tmp_path):
        from evdvsr.eventio import read_exposures, write_exposures
        plan = [ExposureWindow(0, 800, 0), ExposureWindow(1000, 1800, 1)]
        write_exposures(plan, tmp_path / "exposures.json")
        assert read_exposures(tmp_path / "exposures.json") == plan


class TestInterWindow:
    def test_midpoints(self):
        a = ExposureWindow(0, 600, 0)
        b = ExposureWindow(1000, 1601, 1)
        assert inter_window(a, b) == (300.0, 1300.5)
