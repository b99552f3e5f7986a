"""Aggregation of training logs and metric files into tables and plots."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from evdvsr.errors import DataError


@dataclass
class RunRecord:
    name: str
    toggle_signature: str = ""
    config_hash: str = ""
    train_rows: list = field(default_factory=list)   # (iter, lr, Lr, Le, L, ms)
    val_rows: list = field(default_factory=list)     # (iter, psnr)
    metric_rows: list = field(default_factory=list)  # (clip, psnr, ssim, tof, tcc)


def parse_train_log(path: Path) -> list[tuple]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8")
                                  .splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 fields, "
                            f"got {len(parts)}")
        try:
            rows.append((int(parts[0]), *map(float, parts[1:])))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return rows


def parse_val_log(path: Path) -> list[tuple]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8")
                                  .splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'iter, psnr'")
        try:
            rows.append((int(parts[0]), float(parts[1])))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return rows


def parse_metric_lines(path: Path) -> list[tuple]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8")
                                  .splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected "
                            "'clip, psnr, ssim, tof, tcc'")
        try:
            rows.append((parts[0], *map(float, parts[1:])))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return rows


def load_run(run_dir: str | Path) -> RunRecord:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory {run_dir} does not exist")
    rec = RunRecord(name=run_dir.name)
    info = run_dir / "run_info.json"
    if info.is_file():
        payload = json.loads(info.read_text(encoding="utf-8"))
        rec.toggle_signature = payload.get("toggle_signature", "")
        rec.config_hash = payload.get("model_config_hash", "")
    has_any = False
    if (run_dir / "train.log").is_file():
        rec.train_rows = parse_train_log(run_dir / "train.log")
        has_any = True
    if (run_dir / "val.log").is_file():
        rec.val_rows = parse_val_log(run_dir / "val.log")
    if (run_dir / "metrics.csv").is_file():
        rec.metric_rows = parse_metric_lines(run_dir / "metrics.csv")
        has_any = True
    if not has_any:
        raise DataError(f"{run_dir}: neither train.log nor metrics.csv found")
    return rec


def _aggregate_row(rec: RunRecord):
    for row in rec.metric_rows:
        if row[0] == "ALL":
            return row
    return None


def summary_table(runs: list[RunRecord]) -> str:
    header = (f"{'run':<24}{'toggles':<44}{'final L':>10}{'best val':>10}"
              f"{'psnr':>9}{'ssim':>9}{'tof':>8}{'tcc':>8}")
    lines = [header, "-" * len(header)]
    for rec in runs:
        final_loss = rec.train_rows[-1][4] if rec.train_rows else float("nan")
        best_val = max((r[1] for r in rec.val_rows), default=float("nan"))
        agg = _aggregate_row(rec)
        m = agg[1:] if agg else (float("nan"),) * 4
        lines.append(f"{rec.name:<24}{rec.toggle_signature:<44}"
                     f"{final_loss:>10.4g}{best_val:>10.2f}"
                     f"{m[0]:>9.2f}{m[1]:>9.4f}{m[2]:>8.3f}{m[3]:>8.4f}")
    return "\n".join(lines) + "\n"


def ablation_table(runs: list[RunRecord]) -> str:
    """One row per toggle signature, ranked by aggregate PSNR."""
    rows = []
    for rec in runs:
        agg = _aggregate_row(rec)
        if agg is not None:
            rows.append((rec.toggle_signature or rec.name, rec.name, agg))
    rows.sort(key=lambda r: -r[2][1])
    header = f"{'toggles':<44}{'run':<24}{'psnr':>9}{'ssim':>9}{'tof':>8}{'tcc':>8}"
    lines = [header, "-" * len(header)]
    for sig, name, agg in rows:
        lines.append(f"{sig:<44}{name:<24}{agg[1]:>9.2f}{agg[2]:>9.4f}"
                     f"{agg[3]:>8.3f}{agg[4]:>8.4f}")
    return "\n".join(lines) + "\n"


def plot_losses(runs: list[RunRecord], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    lo, hi = None, None
    for rec in runs:
        if not rec.train_rows:
            continue
        its = [r[0] for r in rec.train_rows]
        ax.plot(its, [r[4] for r in rec.train_rows], label=rec.name, lw=1.0)
        lo = min(its[0], lo) if lo is not None else its[0]
        hi = max(its[-1], hi) if hi is not None else its[-1]
    if lo is not None and hi > lo:
        ax.set_xlim(lo, hi)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return (lo, hi)


def plot_val_psnr(runs: list[RunRecord], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    lo, hi = None, None
    drew = False
    for rec in runs:
        if not rec.val_rows:
            continue
        its = [r[0] for r in rec.val_rows]
        ax.plot(its, [r[1] for r in rec.val_rows], marker=".", label=rec.name)
        lo = min(its[0], lo) if lo is not None else its[0]
        hi = max(its[-1], hi) if hi is not None else its[-1]
        drew = True
    if lo is not None and hi > lo:
        ax.set_xlim(lo, hi)
    ax.set_xlabel("iteration")
    ax.set_ylabel("val PSNR (dB)")
    if drew:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return (lo, hi)


def write_report(run_dirs: list[str | Path], out_dir: str | Path) -> None:
    if not run_dirs:
        raise DataError("need at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]
    (out_dir / "summary.txt").write_text(summary_table(runs), encoding="utf-8")
    (out_dir / "ablation.txt").write_text(ablation_table(runs),
                                          encoding="utf-8")
    if any(r.train_rows for r in runs):
        plot_losses(runs, out_dir / "loss_vs_iter.png")
    if any(r.val_rows for r in runs):
        plot_val_psnr(runs, out_dir / "psnr_vs_iter.png")
