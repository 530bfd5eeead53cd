"""Figure rendering for the report paths.

Every CLI command that writes a delimited report also renders a matching
figure next to it; everything goes through the Agg backend so runs are
headless-safe.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def save_params_figure(rows, path) -> None:
    """Bar chart of the per-layer parameter split from analyze_params."""
    labels = [r[0] for r in rows]
    fractions = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(rows)), 3.2))
    ax.bar(labels, fractions, color="#4878cf")
    ax.set_ylabel("fraction of parameters")
    ax.set_title("parameter distribution")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_figure(history, path) -> None:
    """Loss (left axis) and PSNR (right axis) across epochs."""
    epochs = [s.epoch for s in history]
    losses = [s.loss for s in history]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(epochs, losses, color="#d65f5f", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="#d65f5f")
    ax.set_yscale("log")
    evaluated = [(s.epoch, s.psnr) for s in history if s.report is not None]
    if evaluated:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evaluated), color="#4878cf", label="PSNR")
        ax2.set_ylabel("PSNR (dB)", color="#4878cf")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_rate_figure(reports, path) -> None:
    """Rate/distortion curve: bits-per-pixel against PSNR."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([r.bpp for r in reports], [r.psnr for r in reports],
            marker="o", color="#4878cf")
    for r in reports:
        ax.annotate(f"{r.bits}b", (r.bpp, r.psnr), textcoords="offset points",
                    xytext=(4, 4), fontsize=8)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("rate / distortion")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(report, path) -> None:
    """Per-frame PSNR with the sequence mean marked."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(range(len(report.frame_psnr)), report.frame_psnr, marker="o",
            color="#4878cf", label="per frame")
    ax.axhline(report.psnr, color="#d65f5f", linestyle="--",
               label=f"mean {report.psnr:.2f} dB")
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bars_figure(labels, values, path, ylabel: str) -> None:
    """Generic labeled bar chart (ablation cells, task comparisons)."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(labels)), 3.4))
    ax.bar(labels, values, color="#4878cf")
    ax.set_ylabel(ylabel)
    ax.tick_params(axis="x", rotation=60, labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
