"""Figure rendering for the CLI report paths.

Every report command writes its delimited output and a PNG next to it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def novelty_figure(rows: Sequence[tuple[int, float]], attribute: str, path: str | Path) -> None:
    """Fraction of a window's distinct units over cumulative distinct units."""
    fig, ax = plt.subplots(figsize=(7, 3.2))
    if rows:
        ax.plot([r[0] for r in rows], [r[1] for r in rows], lw=1.5, color="black")
    ax.set_xlabel("updating window id")
    ax.set_ylabel("distinct in window / distinct so far")
    ax.set_title(f"window novelty: {attribute}")
    ax.set_ylim(0, 1.05)
    ax.grid(True, ls=":", alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def stream_figure(reports: Sequence[dict], path: str | Path) -> None:
    """Training loss and compression loss across processed windows."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ids = [r["window_id"] for r in reports]
    final_losses = [r["epoch_losses"][-1] if r["epoch_losses"] else float("nan") for r in reports]
    ax1.plot(ids, final_losses, marker="o", ms=3, lw=1, color="black")
    ax1.set_ylabel("final epoch loss")
    ax1.grid(True, ls=":", alpha=0.5)
    ax2.plot(ids, [r["compression_loss_after"] for r in reports], marker="o", ms=3, lw=1,
             color="tab:blue", label="after")
    ax2.plot(ids, [r["compression_loss_before"] for r in reports], marker="x", ms=3, lw=1,
             color="tab:gray", label="before")
    ax2.set_ylabel("compression loss")
    ax2.set_xlabel("updating window id")
    ax2.legend(fontsize=8)
    ax2.grid(True, ls=":", alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def metrics_figure(
    rows: Sequence[dict],
    overall_mrr: float,
    model_name: str,
    model_bytes: int,
    path: str | Path,
) -> None:
    """Per-query-window MRR bars with the overall level marked."""
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ids = [str(r["window_id"]) for r in rows]
    ax.bar(ids, [r["mrr"] for r in rows], color="tab:blue", alpha=0.8)
    ax.axhline(overall_mrr, color="black", ls="--", lw=1,
               label=f"overall MRR {overall_mrr:.3f}")
    ax.set_xlabel("query window")
    ax.set_ylabel("MRR")
    ax.set_ylim(0, 1)
    ax.set_title(f"{model_name} ({model_bytes / 1024:.0f} KiB)")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", ls=":", alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def bench_figure(rows: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    """Time per record and retrieval quality against worker count."""
    fig, ax1 = plt.subplots(figsize=(6, 3.2))
    ps = [r[0] for r in rows]
    ax1.plot(ps, [r[1] for r in rows], marker="x", color="tab:red", label="ms/record")
    ax1.set_xlabel("workers (p)")
    ax1.set_ylabel("avg time per record (ms)", color="tab:red")
    ax1.tick_params(axis="y", labelcolor="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(ps, [r[2] for r in rows], marker="o", color="tab:blue", label="MRR")
    ax2.set_ylabel("MRR", color="tab:blue")
    ax2.tick_params(axis="y", labelcolor="tab:blue")
    ax1.grid(True, ls=":", alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
