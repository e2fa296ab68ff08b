"""Report figures rendered next to the delimited outputs.

Everything goes through the Agg backend so the CLI works headless; each
helper writes one PNG and returns the path it wrote.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

FIGSIZE = (6.4, 4.0)
DPI = 130


def save_loss_curve(curve, path):
    """Loss per optimizer step with the learning-rate schedule on a twin axis.

    ``curve`` rows are (step, lr, loss).
    """
    steps = [row[0] for row in curve]
    lrs = [row[1] for row in curve]
    losses = [row[2] for row in curve]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(steps, losses, color="tab:blue", lw=1.2, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss", color="tab:blue")
    ax.tick_params(axis="y", labelcolor="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:orange", lw=1.0, alpha=0.7, label="lr")
    ax2.set_ylabel("learning rate", color="tab:orange")
    ax2.tick_params(axis="y", labelcolor="tab:orange")
    ax.set_title("training loss and schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_metric_bars(metrics: dict, path):
    """Bar chart of the headline F1 family from a metrics report."""
    keys = ["f1", "ign_f1", "intra_f1", "inter_f1", "infer_f1"]
    vals = [metrics.get(k, 0.0) for k in keys]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    bars = ax.bar(keys, vals, color="tab:blue")
    if metrics.get("infer_no_instances"):
        bars[-1].set_color("lightgray")
    for bar, v in zip(bars, vals):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}",
                ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
