"""Figure rendering and portable image dumps for report outputs.

Every report path writes figures next to its delimited output: reliability
diagrams for calibration runs, FP/mAP curves for the crop ablation, loss
curves for training logs, and grayscale PGM dumps for heatmap fields.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .calibrate import ReliabilityReport
from .evaluate import AblationRow
from .train import LogRow


def save_reliability_diagram(report: ReliabilityReport, path: str | Path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 4.4))
    edges = np.asarray(report.bin_edges)
    centers = (edges[:-1] + edges[1:]) / 2.0
    width = edges[1] - edges[0]
    freq = np.array([np.nan if f != f else f for f in report.bin_frequency])
    conf = np.array([np.nan if c != c else c for c in report.bin_confidence])

    ax.bar(centers, freq, width=width * 0.92, color="#ff9337", edgecolor="#c96a17",
           label="empirical frequency")
    ax.plot([0, 1], [0, 1], color="0.4", linestyle="--", linewidth=1, label="perfect calibration")
    ax.plot(conf, freq, "o", color="#1f4e96", markersize=4, label="bin mean confidence")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("stated confidence")
    ax.set_ylabel("observed frequency")
    ax.set_title(title or f"ECE = {report.ece:.4f} (n = {report.n_records})")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_curve(rows: list[AblationRow], path: str | Path) -> None:
    fig, ax1 = plt.subplots(figsize=(5.2, 3.8))
    crops = [r.crop_px for r in rows]
    ax1.plot(crops, [r.fp_count for r in rows], "o-", color="#b03030", label="false positives")
    ax1.set_xlabel("suppression crop size (px)")
    ax1.set_ylabel("false positives", color="#b03030")
    ax2 = ax1.twinx()
    ax2.plot(crops, [r.mean_ap for r in rows], "s-", color="#1f4e96", label="mAP")
    ax2.set_ylabel("mAP", color="#1f4e96")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curves(log: list[LogRow], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    steps = [r.step for r in log]
    ax.plot(steps, [r.total for r in log], color="0.15", label="total", linewidth=1.4)
    ax.plot(steps, [r.intensity_integral for r in log], label="intensity integral", linewidth=0.9)
    ax.plot(steps, [r.center_term for r in log], label="center term", linewidth=0.9)
    ax.plot(steps, [r.regression_term for r in log], label="size regression", linewidth=0.9)
    ax.plot(steps, [r.classification_term for r in log], label="classification", linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss term")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_pgm(values: np.ndarray, path: str | Path, normalize: bool = True) -> None:
    """Binary 8-bit PGM dump of a 2-d field."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    if normalize:
        lo, hi = float(arr.min()), float(arr.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        data = np.round((arr - lo) * scale)
    else:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255.0)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.astype(np.uint8).tobytes())


def save_heatmap_png(values: np.ndarray, path: str | Path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    im = ax.imshow(np.asarray(values), cmap="inferno", origin="upper")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
