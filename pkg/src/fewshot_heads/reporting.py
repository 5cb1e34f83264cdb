"""Figure rendering for the report paths: loss curves, metric bars, timing charts.

Everything renders through the Agg backend straight to files, next to the
CSV/JSON the figures summarize.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from fewshot_heads.data_pipeline import save_image
from fewshot_heads.evaluation.protocols import MetricReport
from fewshot_heads.evaluation.timing import TimingTable

LOSS_COLUMNS = ("l_cnt", "l_adv", "l_fm", "l_mch", "l_dsc")
SCORE_COLUMNS = ("d_real", "d_fake")


def plot_training_curves(metrics_csv: Path | str, out_png: Path | str) -> Path:
    """Loss and discriminator-score curves from a metrics log."""
    with open(metrics_csv) as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"metrics log {metrics_csv} is empty")
    steps = np.array([int(r["step"]) for r in rows])

    fig, (ax_loss, ax_score) = plt.subplots(2, 1, figsize=(8, 7), sharex=True)
    for column in LOSS_COLUMNS:
        ax_loss.plot(steps, [float(r[column]) for r in rows], label=column, linewidth=1)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_loss.grid(alpha=0.3)
    for column in SCORE_COLUMNS:
        ax_score.plot(steps, [float(r[column]) for r in rows], label=column, linewidth=1)
    ax_score.axhline(1.0, color="gray", linestyle=":", linewidth=0.8)
    ax_score.axhline(-1.0, color="gray", linestyle=":", linewidth=0.8)
    ax_score.set_xlabel("step")
    ax_score.set_ylabel("discriminator score")
    ax_score.legend(loc="upper right", fontsize=8)
    ax_score.grid(alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_metric_report(report: MetricReport, out_png: Path | str) -> Path:
    """Bar panel of FID / SSIM / CSIM per report row."""
    labels = [f"{r.method} T={r.t}\n{r.aggregation}" for r in report.rows]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, metric, better in zip(axes, ("fid", "ssim", "csim"), ("lower", "higher", "higher")):
        values = [getattr(r, metric) for r in report.rows]
        ax.bar(range(len(values)), values, color="tab:blue")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_title(f"{metric.upper()} ({better} is better)", fontsize=9)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_timing_table(table: TimingTable, out_png: Path | str) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    labels = [f"{r.kind}\nT={r.t}" for r in table.rows]
    means = [r.mean_s for r in table.rows]
    errors = [r.std_s for r in table.rows]
    ax.bar(range(len(means)), means, yerr=errors, color="tab:orange", capsize=3)
    ax.set_xticks(range(len(means)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("seconds")
    ax.set_title(table.hardware, fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_contact_sheet(
    frames: Sequence[np.ndarray], out_png: Path | str, columns: int = 8
) -> Path:
    """Tile frames (in [-1, 1]) into one grid image."""
    if len(frames) == 0:
        raise ValueError("contact sheet needs at least one frame")
    columns = min(columns, len(frames))
    rows = (len(frames) + columns - 1) // columns
    h, w = np.asarray(frames[0]).shape[:2]
    sheet = np.full((rows * h, columns * w, 3), -1.0, dtype=np.float32)
    for i, frame in enumerate(frames):
        r, c = divmod(i, columns)
        sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = np.asarray(frame)
    out_png = Path(out_png)
    save_image(sheet, out_png)
    return out_png
