"""Figures written by the CLI: image sheets and training curves."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402

from .dataset import to_uint8  # noqa: E402


def image_sheet(rows: list[list[torch.Tensor]], path, col_titles=None, row_titles=None, cell_inches: float = 1.1):
    """Grid of [3, H, W] images in [-1, 1]; ``None`` entries are left blank."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(cell_inches * n_cols, cell_inches * n_rows + 0.3), squeeze=False)
    for i, row in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            for side in ax.spines.values():
                side.set_visible(False)
            if j < len(row) and row[j] is not None:
                ax.imshow(to_uint8(row[j]), interpolation="nearest")
            if i == 0 and col_titles and j < len(col_titles):
                ax.set_title(col_titles[j], fontsize=7)
        if row_titles:
            axes[i][0].set_ylabel(row_titles[i], fontsize=7)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def age_view_sheet(inputs, age_rows, view_rows, ages, poses, path):
    """One row per subject: input | outputs over ``ages`` | outputs over ``poses``."""
    rows = [[x, *a, *v] for x, a, v in zip(inputs, age_rows, view_rows)]
    titles = ["input", *[f"{a}y" for a in ages], *[f"{p.azimuth:+.2f},{p.polar:+.2f}" for p in poses]]
    return image_sheet(rows, path, col_titles=titles)


def loss_curves(log_dir, path, smooth: int = 25):
    """Plot the ``total`` column of every ``<stage>.jsonl`` log in ``log_dir``."""
    logs = sorted(Path(log_dir).glob("*.jsonl"))
    if not logs:
        return None
    fig, axes = plt.subplots(1, len(logs), figsize=(3 * len(logs), 2.6), squeeze=False)
    for ax, log in zip(axes[0], logs):
        rows = [json.loads(line) for line in log.read_text().splitlines() if line.strip()]
        y = torch.tensor([r["total"] for r in rows], dtype=torch.float64)
        if len(y) >= smooth:
            y = torch.nn.functional.avg_pool1d(y[None, None], smooth, 1)[0, 0]
        ax.plot(y.numpy(), lw=1)
        ax.set_yscale("log")
        ax.set_title(log.stem, fontsize=8)
        ax.set_xlabel("step", fontsize=7)
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def age_bucket_plot(report, path):
    """Predicted vs. target age per bucket, with the identity line."""
    ages = [float(a) for a in report.per_age]
    mean = [b["pred_mean"] for b in report.per_age.values()]
    std = [b["pred_std"] for b in report.per_age.values()]
    fig, ax = plt.subplots(figsize=(3.2, 3.0))
    ax.errorbar(ages, mean, yerr=std, fmt="o-", ms=3, lw=1, capsize=2, label="predicted")
    ax.plot([0, 100], [0, 100], "k--", lw=0.6, label="target")
    ax.set_xlabel("target age")
    ax.set_ylabel("predicted age")
    ax.set_xlim(-5, 80)
    ax.set_ylim(-5, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
