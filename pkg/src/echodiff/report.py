"""Report rendering: delimited metric tables plus matplotlib figures.

Every figure is written to a file (Agg backend, no display); the evaluate
command drops them next to the TSV/JSON outputs so a run directory is
self-describing.
"""

import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricsReport  # noqa: E402


def save_metrics_tsv(report: MetricsReport, path: Path | str) -> Path:
    """Tab-delimited one-row summary matching the printed table columns."""
    path = Path(path)
    cond = "SPADE" if report.condition_mode == "spade" else report.condition_mode.capitalize()
    lines = [
        "cond\tmodel\tk\tfid\tfvd\tssim\tn_real\tn_generated",
        f"{cond}\t{report.model}\t{report.frames}\t{report.fid:.6f}\t"
        f"{report.fvd:.6f}\t{report.mean_ssim:.6f}\t{report.n_real}\t{report.n_generated}",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def render_metrics_figure(report: MetricsReport, path: Path | str) -> Path:
    path = Path(path)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, (name, value, better) in zip(
            axes,
            [("FID", report.fid, "lower"), ("FVD", report.fvd, "lower"),
             ("SSIM", report.mean_ssim, "higher")]):
        ax.bar([0], [value], width=0.5, color="#4878a8")
        ax.set_xticks([])
        ax.set_title(f"{name} ({better} is better)")
        ax.text(0, value, f"{value:.3f}", ha="center", va="bottom")
    fig.suptitle(f"{report.model} / {report.condition_mode} / K={report.frames}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_loss_curve(log_path: Path | str, out_path: Path | str) -> Path:
    """Loss-vs-step figure from a metrics.jsonl training log."""
    log_path, out_path = Path(log_path), Path(out_path)
    steps, losses = [], []
    for line in log_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        steps.append(rec["step"])
        losses.append(rec["loss"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.0)
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_frame_strip(video, out_path: Path | str, every: int = 4,
                       title: str | None = None) -> Path:
    """Row of frames sampled every `every` steps, for qualitative inspection."""
    out_path = Path(out_path)
    arr = np.asarray(video.detach().cpu())
    frames = arr[::every, 0]
    n = frames.shape[0]
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9))
    if n == 1:
        axes = [axes]
    for i, ax in enumerate(axes):
        ax.imshow(frames[i], cmap="gray", vmin=-1.0, vmax=1.0)
        ax.set_title(f"k={i * every}", fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
