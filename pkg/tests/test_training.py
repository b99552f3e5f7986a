import dataclasses
import math

import numpy as np
import pytest
import torch

from conftest import central_diff, rel_err
from evdvsr.config import ModelConfig, TrainConfig
from evdvsr.data import ClipDataset, batch_to_tensors, sample_to_tensors
from evdvsr.errors import DataError, InvalidInputError, TrainingDivergenceError
from evdvsr.events import SequenceSample, VoxelGrid
from evdvsr.model import EvDeblurVSR
from evdvsr.resize import upsample_frame
from evdvsr.training import (LossBreakdown, augment, cosine_lr, fit,
                             load_checkpoint, loss_e, loss_r, make_optimizer,
                             model_from_checkpoint, save_checkpoint,
                             train_step)

TINY = dict(channels=8, attention_heads=2, dcn_groups=2, residual_blocks=2)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return EvDeblurVSR(ModelConfig(**TINY))


def random_sample(rng, t=3, hw=8, s=4, bins=5):
    def grids(n, kind):
        return [VoxelGrid(rng.random((bins, hw, hw)) - 0.5, kind, (0, 1))
                for _ in range(n)]
    return SequenceSample(
        blurry_lr=rng.random((t, 3, hw, hw)).astype(np.float32),
        intra_voxels=grids(t, "intra"),
        fwd_voxels=grids(t - 1, "inter_forward"),
        bwd_voxels=grids(t - 1, "inter_backward"),
        scale=s,
        sharp_hr=rng.random((t, 3, hw * s, hw * s)).astype(np.float32),
        edge_masks=rng.random((t, 3, hw * s, hw * s)).astype(np.float32),
    )


class TestLossR:
    def test_zero_when_equal(self):
        x = torch.rand(2, 3, 4, 4)
        assert float(loss_r(x, x)) == 0.0

    def test_constant_offset(self):
        gt = torch.rand(1, 3, 8, 8)
        val = float(loss_r(gt + 0.1, gt))
        assert val == pytest.approx(0.01, rel=1e-5)

    def test_matches_double_loop_oracle(self, rng):
        pred = torch.tensor(rng.random((2, 3, 5, 5)))
        gt = torch.tensor(rng.random((2, 3, 5, 5)))
        acc, n = 0.0, 0
        for a, b in zip(pred.reshape(-1), gt.reshape(-1)):
            acc += (float(a) - float(b)) ** 2
            n += 1
        assert float(loss_r(pred, gt)) == pytest.approx(acc / n, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            loss_r(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 5, 5))


class TestLossE:
    def test_zero_masks_kill_loss(self):
        pred = torch.rand(1, 2, 3, 6, 6)
        gt = torch.rand(1, 2, 3, 6, 6)
        assert float(loss_e(pred, gt, torch.zeros_like(pred))) == 0.0

    def test_eta_floor_when_equal(self):
        x = torch.rand(1, 2, 3, 6, 6, dtype=torch.float64)
        masks = torch.rand_like(x)
        val = float(loss_e(x, x, masks, eta=1e-8))
        assert val == pytest.approx(1e-8 * float(masks.mean()), rel=1e-6)

    def test_single_pixel_charbonnier(self):
        pred = torch.full((1, 1, 1, 1, 1), 0.3, dtype=torch.float64)
        gt = torch.zeros_like(pred)
        masks = torch.ones_like(pred)
        want = math.sqrt(0.09 + 1e-16)
        assert float(loss_e(pred, gt, masks)) == pytest.approx(want, rel=1e-9)

    def test_mask_monotonicity(self, rng):
        g = torch.Generator().manual_seed(0)
        pred = torch.rand(1, 2, 3, 4, 4, generator=g)
        gt = torch.rand(1, 2, 3, 4, 4, generator=g)
        masks = torch.rand(1, 2, 3, 4, 4, generator=g) * 0.5
        base = float(loss_e(pred, gt, masks))
        masks[0, 1, 2, 1, 1] += 0.3
        assert float(loss_e(pred, gt, masks)) >= base

    def test_l1_limit_for_large_diffs(self):
        g = torch.Generator().manual_seed(1)
        diff = torch.rand(1, 1, 3, 5, 5, generator=g,
                          dtype=torch.float64) * 0.8 + 0.1
        val = float(loss_e(diff, torch.zeros_like(diff),
                           torch.ones_like(diff)))
        l1 = float(diff.abs().mean())
        assert abs(val - l1) / l1 < 1e-6

    def test_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(2)
        pred = (torch.rand(1, 1, 3, 4, 4, generator=g, dtype=torch.float64)
                * 0.5 + 0.2).requires_grad_(True)
        gt = torch.zeros_like(pred)
        masks = torch.rand(1, 1, 3, 4, 4, generator=g, dtype=torch.float64)
        loss_e(pred, gt, masks).backward()
        fd = central_diff(lambda: loss_e(pred, gt, masks), pred, stride=3)
        sel = torch.zeros_like(fd)
        sel.reshape(-1)[::3] = 1
        assert rel_err(fd, pred.grad * sel, floor=1e-6) < 1e-4

    def test_mask_out_of_range_rejected(self):
        x = torch.rand(1, 1, 3, 4, 4)
        with pytest.raises(InvalidInputError):
            loss_e(x, x, torch.full_like(x, 1.5))

    def test_total_dominates_components(self):
        lb = LossBreakdown(0.2, 0.05)
        assert lb.total == pytest.approx(0.25)
        assert lb.total >= max(lb.l_r, lb.l_e)


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig(base_lr=1e-4, lr_min=1e-7, total_iters=1000)
        assert cosine_lr(0, cfg) == pytest.approx(1e-4)
        assert cosine_lr(1000, cfg) == pytest.approx(1e-7)
        want_mid = 1e-7 + (1e-4 - 1e-7) * (1 + math.cos(math.pi / 2)) / 2
        assert cosine_lr(500, cfg) == pytest.approx(want_mid, rel=1e-12)

    def test_monotone_decrease(self):
        cfg = TrainConfig(total_iters=100)
        vals = [cosine_lr(k, cfg) for k in range(101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestTrainStep:
    def batch(self, rng, t=2, hw=8):
        return batch_to_tensors([random_sample(rng, t=t, hw=hw)])

    def test_zero_lr_leaves_parameters_bitwise(self, rng):
        model = tiny_model()
        cfg = TrainConfig(base_lr=0.0, lr_min=0.0, total_iters=10)
        opt = make_optimizer(model, cfg)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_step(model, self.batch(rng), opt, 0, cfg)
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v), k

    def test_initial_loss_equals_bicubic_baseline(self, rng):
        model = tiny_model()
        sample = random_sample(rng)
        batch = batch_to_tensors([sample])
        cfg = TrainConfig(total_iters=10)
        opt = make_optimizer(model, cfg)
        losses = train_step(model, batch, opt, 0, cfg)
        bicubic = torch.stack([upsample_frame(batch["frames"][0, t], 4)
                               for t in range(3)]).unsqueeze(0)
        want_r = float(loss_r(bicubic, batch["gt"]))
        want_e = float(loss_e(bicubic, batch["gt"], batch["masks"]))
        assert losses.l_r == pytest.approx(want_r, rel=1e-6)
        assert losses.l_e == pytest.approx(want_e, rel=1e-6)

    def test_divergence_raises_with_iteration(self, rng):
        model = tiny_model()
        batch = self.batch(rng)
        batch["gt"] = batch["gt"] * float("nan")
        cfg = TrainConfig(total_iters=10)
        opt = make_optimizer(model, cfg)
        with pytest.raises(TrainingDivergenceError) as exc:
            train_step(model, batch, opt, 7, cfg)
        assert exc.value.iteration == 7

    def test_loss_toggles(self, rng):
        model = tiny_model()
        batch = self.batch(rng)
        opt = make_optimizer(model, TrainConfig(total_iters=1))
        only_r = train_step(model, batch, opt,
                            0, TrainConfig(total_iters=1, use_le=False))
        assert only_r.l_e == 0.0 and only_r.l_r > 0.0
        only_e = train_step(model, batch, opt,
                            0, TrainConfig(total_iters=1, use_lr=False))
        assert only_e.l_r == 0.0 and only_e.l_e > 0.0


class TestAugment:
    def test_flip_twice_restores_sample(self, rng):
        sample = random_sample(rng, t=3, hw=8)
        once = augment(sample, np.random.default_rng(0),
                       flip_prob_h=1.0, flip_prob_v=1.0)
        twice = augment(once, np.random.default_rng(0),
                        flip_prob_h=1.0, flip_prob_v=1.0)
        assert np.array_equal(twice.blurry_lr, sample.blurry_lr)
        assert np.array_equal(twice.sharp_hr, sample.sharp_hr)
        for a, b in zip(twice.intra_voxels, sample.intra_voxels):
            assert np.array_equal(a.data, b.data)

    def test_flip_touches_only_spatial_axes(self, rng):
        sample = random_sample(rng, t=2, hw=8)
        flipped = augment(sample, np.random.default_rng(0),
                          flip_prob_h=1.0, flip_prob_v=0.0)
        want = sample.intra_voxels[0].data[:, :, ::-1]
        assert np.array_equal(flipped.intra_voxels[0].data, want)

    def test_crop_consistency_lr_hr(self, rng):
        sample = random_sample(rng, t=2, hw=16, s=4)
        out = augment(sample, np.random.default_rng(3), crop_size=8,
                      flip_prob_h=0.0, flip_prob_v=0.0, center_crop=True)
        y0 = x0 = (16 - 8) // 2
        assert np.array_equal(out.blurry_lr,
                              sample.blurry_lr[..., y0:y0 + 8, x0:x0 + 8])
        assert np.array_equal(
            out.sharp_hr,
            sample.sharp_hr[..., 4 * y0:4 * (y0 + 8), 4 * x0:4 * (x0 + 8)])
        assert out.edge_masks.shape == (2, 3, 32, 32)

    def test_oversized_crop_rejected(self, rng):
        sample = random_sample(rng, t=2, hw=8)
        with pytest.raises(InvalidInputError):
            augment(sample, np.random.default_rng(0), crop_size=12)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        model = tiny_model(3)
        cfg = TrainConfig(total_iters=5)
        opt = make_optimizer(model, cfg)
        batch = batch_to_tensors([random_sample(rng)])
        train_step(model, batch, opt, 0, cfg)
        gen = np.random.default_rng(9)
        gen.random(13)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, opt, 1, gen, cfg)
        payload = load_checkpoint(path)
        clone = model_from_checkpoint(payload)
        for a, b in zip(model.state_dict().values(),
                        clone.state_dict().values()):
            assert torch.equal(a, b)
        gen2 = np.random.default_rng(0)
        gen2.bit_generator.state = payload["rng_state"]
        assert gen2.random() == gen.random()
        assert payload["iteration"] == 1
        assert payload["format_version"] == "evdvsr-checkpoint-1"

    def test_tampered_config_hash_rejected(self, tmp_path):
        model = tiny_model()
        cfg = TrainConfig(total_iters=1)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, make_optimizer(model, cfg), 0,
                        np.random.default_rng(0), cfg)
        payload = torch.load(path, weights_only=False)
        payload["model_config"]["channels"] = 16
        torch.save(payload, path)
        with pytest.raises(DataError):
            load_checkpoint(path)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    from evdvsr.config import SimConfig
    from evdvsr.synthetic import generate_dataset
    root = tmp_path_factory.mktemp("ds")
    cfg = SimConfig(clips=2, frames_per_clip=4, lr_height=16, lr_width=16,
                    subframes_per_blur=6, seed=5)
    generate_dataset(root, cfg)
    return root


class TestFit:
    def tcfg(self, iters, **kw):
        base = dict(clip_length=3, crop_size=16, batch_size=1,
                    total_iters=iters, base_lr=1e-4, seed=11,
                    log_every=1, val_every=0, ckpt_every=100)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_iters_checkpoint_equals_init(self, small_dataset, tmp_path):
        dataset = ClipDataset(small_dataset, 5, 4)
        model = tiny_model(1)
        init_state = {k: v.clone() for k, v in model.state_dict().items()}
        final = fit(model, dataset, self.tcfg(0), tmp_path / "run")
        payload = load_checkpoint(final)
        clone = model_from_checkpoint(payload)
        for k, v in clone.state_dict().items():
            assert torch.equal(init_state[k], v)
        assert payload["iteration"] == 0

    def test_resume_matches_uninterrupted_bitwise(self, small_dataset,
                                                  tmp_path):
        dataset = ClipDataset(small_dataset, 5, 4)
        model_a = tiny_model(2)
        fit(model_a, dataset, self.tcfg(6), tmp_path / "full")

        model_b = tiny_model(2)
        fit(model_b, dataset, self.tcfg(6, ckpt_every=3), tmp_path / "half")
        model_c = tiny_model(2)
        final = fit(model_c, dataset, self.tcfg(6, ckpt_every=3),
                    tmp_path / "half",
                    resume_from=tmp_path / "half" / "checkpoint_0000003.pt")
        resumed = model_from_checkpoint(load_checkpoint(final))
        for (ka, va), (kc, vc) in zip(model_a.state_dict().items(),
                                      resumed.state_dict().items()):
            assert torch.equal(va, vc), ka

    def test_log_format(self, small_dataset, tmp_path):
        from evdvsr.report import parse_train_log
        dataset = ClipDataset(small_dataset, 5, 4)
        model = tiny_model(4)
        fit(model, dataset, self.tcfg(2), tmp_path / "run")
        rows = parse_train_log(tmp_path / "run" / "train.log")
        assert [r[0] for r in rows] == [1, 2]
        assert all(len(r) == 6 for r in rows)
