"""Command-line driver: ``evdvsr <verb> --config <path> [--set k=v]... [--out <dir>]``.

Verbs: simulate, train, eval, infer, selfcheck, report.
Exit codes: 0 success, 1 usage/config error, 2 data error,
3 training divergence or self-check failure. ``EVDVSR_SEED`` overrides the
configured seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from evdvsr import evaluate, report as report_mod, selfcheck, training
from evdvsr.config import (Config, ModelConfig, apply_assignment, dump_config,
                           load_config, model_config_hash, toggle_signature)
from evdvsr.data import ClipCache, ClipDataset
from evdvsr.errors import (ConfigError, DataError, InvalidInputError,
                           TrainingDivergenceError)
from evdvsr.eventio import Clip, load_png, save_png
from evdvsr.model import KNOWN_FAULTS, EvDeblurVSR, inject_fault
from evdvsr.synthetic import generate_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FAIL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evdvsr",
        description="Event-assisted joint video deblurring and super-resolution")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="config override")
        p.add_argument("--out", required=out_required,
                       help="output directory")

    p = sub.add_parser("simulate", help="synthesize a dataset directory")
    common(p)
    p.add_argument("--synthetic", action="store_true",
                   help="procedurally generate moving-shape clips")
    p.add_argument("--source", help="directory of sharp HR image-sequence "
                                    "clips (one subdirectory per clip)")
    p.add_argument("--clips", type=int, help="shorthand for sim.clips")
    p.add_argument("--frames", type=int,
                   help="shorthand for sim.frames_per_clip")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="dataset root (shorthand for data.root)")
    p.add_argument("--resume", help="checkpoint path, or 'latest'")
    p.add_argument("--total-iters", type=int,
                   help="shorthand for train.total_iters")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (shorthand for data.root)")
    p.add_argument("--split", choices=["all", "train", "val"], default="all")
    p.add_argument("--tile", type=int, default=0,
                   help="LR tile size for tiled inference (0 = untiled)")
    p.add_argument("--no-images", action="store_true")
    p.add_argument("--gt-as-pred", action="store_true",
                   help="debug: score ground truth against itself")

    p = sub.add_parser("infer", help="restore one clip directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip directory")
    p.add_argument("--tile", type=int, default=0)

    p = sub.add_parser("selfcheck", help="run the invariant property suite")
    common(p, out_required=False)
    p.add_argument("--break", dest="break_fault", choices=list(KNOWN_FAULTS),
                   help="fault-injection hook (testing the checker)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="aggregate run logs into tables/plots")
    common(p)
    p.add_argument("runs", nargs="+", help="run directories")
    return parser


def _resolve_config(args) -> Config:
    if getattr(args, "config", None):
        cfg = load_config(args.config, args.overrides)
    else:
        cfg = Config()
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key=value")
            key, _, value = item.partition("=")
            apply_assignment(cfg, key.strip(), value)
    env_seed = os.environ.get("EVDVSR_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"EVDVSR_SEED must be an integer: {e}") from e
        cfg.train.seed = seed
        cfg.sim.seed = seed
    return cfg


def _write_run_info(out_dir: Path, cfg: Config) -> None:
    payload = {
        "model_config": dataclasses.asdict(cfg.model),
        "model_config_hash": model_config_hash(cfg.model),
        "toggle_signature": toggle_signature(cfg),
    }
    (out_dir / "run_info.json").write_text(json.dumps(payload, indent=1),
                                           encoding="utf-8")


def cmd_simulate(args, cfg: Config) -> int:
    out = Path(args.out)
    if args.clips is not None:
        cfg.sim.clips = args.clips
    if args.frames is not None:
        cfg.sim.frames_per_clip = args.frames
    if args.synthetic:
        names = generate_dataset(out, cfg.sim)
    elif args.source:
        names = _simulate_from_source(Path(args.source), out, cfg)
    else:
        raise ConfigError("simulate needs --synthetic or --source")
    print(f"wrote {len(names)} clips under {out}")
    return EXIT_OK


def _simulate_from_source(source: Path, out: Path, cfg: Config) -> list[str]:
    from evdvsr.eventio import write_clip_dir, write_manifest
    from evdvsr.events import ExposureWindow
    from evdvsr.synthetic import derive_clip_artifacts

    if not source.is_dir():
        raise DataError(f"source directory {source} does not exist")
    clip_dirs = [p for p in sorted(source.iterdir()) if p.is_dir()]
    if not clip_dirs:
        raise DataError(f"no clip subdirectories under {source}")
    sim = cfg.sim
    names = []
    for src in clip_dirs:
        files = sorted(src.glob("*.png"))
        n_sub = sim.subframes_per_blur
        n_frames = (len(files) - 1) // n_sub
        if n_frames < 2:
            raise DataError(f"{src}: needs at least {2 * n_sub + 1} frames "
                            f"for 2 exposures of {n_sub} subframes")
        frames = np.stack([load_png(f) for f in files])
        period = sim.frame_period_us
        timestamps = np.rint(np.arange(len(files))
                             * (period / n_sub)).astype(np.int64)
        exp_len = int(round(sim.exposure_duty * period))
        exposures = [ExposureWindow(k * period, k * period + exp_len, k)
                     for k in range(n_frames)]
        art = derive_clip_artifacts(frames, timestamps, exposures,
                                    sim.scale, sim.theta)
        write_clip_dir(out / src.name, art["blurry_lr"], art["sharp_hr"],
                       art["events_lr"], art["events_hr"], exposures)
        names.append(src.name)
    write_manifest(out, {"format": "evdvsr-dataset-1", "source": str(source),
                         "seed": sim.seed, "theta": sim.theta,
                         "scale": sim.scale, "bins": sim.bins,
                         "clips": names,
                         "subframes_per_blur": sim.subframes_per_blur,
                         "exposure_duty": sim.exposure_duty,
                         "frame_period_us": sim.frame_period_us})
    return names


def _dataset_root(args, cfg: Config) -> str:
    root = getattr(args, "data", None) or cfg.data.root
    if not root:
        raise ConfigError("no dataset root: pass --data or set data.root")
    return root


def cmd_train(args, cfg: Config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.total_iters is not None:
        cfg.train.total_iters = args.total_iters
    root = _dataset_root(args, cfg)
    dataset = ClipDataset(root, cfg.model.voxel_bins, cfg.model.scale,
                          cfg.data.train_clips, cfg.data.val_clips)
    torch.manual_seed(cfg.train.seed)
    model = EvDeblurVSR(cfg.model)
    (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    _write_run_info(out, cfg)
    resume = None
    if args.resume:
        resume = out / "checkpoint_latest.pt" if args.resume == "latest" \
            else Path(args.resume)
        if not Path(resume).is_file():
            raise DataError(f"resume checkpoint {resume} not found")
    final = training.fit(model, dataset, cfg.train, out, resume_from=resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _load_model(checkpoint: str) -> tuple[EvDeblurVSR, dict]:
    payload = training.load_checkpoint(checkpoint)
    model = training.model_from_checkpoint(payload)
    model.eval()
    return model, payload


def cmd_eval(args, cfg: Config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, payload = _load_model(args.checkpoint)
    root = _dataset_root(args, cfg)
    dataset = ClipDataset(root, model.config.voxel_bins, model.config.scale,
                          cfg.data.train_clips, cfg.data.val_clips,
                          need_masks=False)
    caches = {"all": dataset.train + dataset.val, "train": dataset.train,
              "val": dataset.val}[args.split]
    if not caches:
        raise DataError(f"split {args.split!r} selects no clips")
    tile = args.tile or None
    report, baseline = evaluate.evaluate_caches(
        model, caches, out, tile_size=tile, save_images=not args.no_images,
        gt_as_pred=args.gt_as_pred)
    (out / "metrics.csv").write_text(report.machine_lines(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.table(), encoding="utf-8")
    (out / "baseline_metrics.csv").write_text(baseline.machine_lines(),
                                              encoding="utf-8")
    (out / "baseline_metrics.txt").write_text(baseline.table(),
                                              encoding="utf-8")
    info = {"model_config": payload["model_config"],
            "model_config_hash": payload["model_config_hash"],
            "toggle_signature": _ckpt_toggles(payload),
            "checkpoint_iteration": payload["iteration"],
            "split": args.split}
    (out / "run_info.json").write_text(json.dumps(info, indent=1),
                                       encoding="utf-8")
    print(report.table())
    return EXIT_OK


def _ckpt_toggles(payload: dict) -> str:
    cfg = Config(model=ModelConfig(**payload["model_config"]))
    if payload.get("train_config"):
        for key in ("use_lr", "use_le"):
            setattr(cfg.train, key, payload["train_config"].get(key, True))
    return toggle_signature(cfg)


def cmd_infer(args, cfg: Config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = _load_model(args.checkpoint)
    clip = Clip(args.clip)
    cache = ClipCache(clip, model.config.voxel_bins, model.config.scale,
                      need_gt=False, need_masks=False)
    pred = evaluate.forward_clip(model, cache.full(), args.tile or None)
    pred = np.clip(pred, 0.0, 1.0)
    for i, frame in enumerate(pred):
        save_png(out / f"{i:06d}.png", frame)
    print(f"wrote {len(pred)} HR frames under {out}")
    return EXIT_OK


def cmd_selfcheck(args, cfg: Config) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    if args.break_fault:
        with inject_fault(args.break_fault):
            results = selfcheck.run_selfcheck(args.seed)
    else:
        results = selfcheck.run_selfcheck(args.seed)
    text = selfcheck.format_results(results)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selfcheck.txt").write_text(text, encoding="utf-8")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_report(args, cfg: Config) -> int:
    report_mod.write_report(args.runs, args.out)
    print(f"report written under {args.out}")
    return EXIT_OK


_DISPATCH = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "selfcheck": cmd_selfcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        cfg = _resolve_config(args)
        return _DISPATCH[args.verb](args, cfg)
    except ConfigError as e:
        print(f"evdvsr: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, DataError) as e:
        print(f"evdvsr: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergenceError as e:
        print(f"evdvsr: training diverged: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
