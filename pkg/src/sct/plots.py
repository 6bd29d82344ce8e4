"""Figures written next to the CSV reports. CSV stays the contract; PNGs are a convenience."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from sct.memory import MB  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_memory(report, path):
    """Dense vs SCT training-state bytes for each distinct projection shape."""
    shapes = {}
    for r in report.projection_rows():
        key = (r.m, r.n, r.k)
        shapes.setdefault(key, r)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        labels = [f"{m}x{n}" + (f"\nk={k}" if k else "\ndense") for (m, n, k) in shapes]
        xs = range(len(shapes))
        dense = [r.bytes_dense / MB for r in shapes.values()]
        sct = [r.bytes_sct / MB for r in shapes.values()]
        ax.bar([x - 0.2 for x in xs], dense, width=0.4, label="dense + Adam")
        ax.bar([x + 0.2 for x in xs], sct, width=0.4, label="SCT + Adam")
        ax.set_yscale("log")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels)
        ax.set_ylabel("training state per layer (MB)")
        ax.legend()
        return _save(fig, path)


def plot_losses(curves, path, title=None):
    """``curves`` maps a label to (losses, smoothed) sequences."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        for label, (raw, smooth) in curves.items():
            steps = range(1, len(raw) + 1)
            line, = ax.plot(steps, smooth, label=label)
            ax.plot(steps, raw, color=line.get_color(), alpha=0.15, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy (smoothed)")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_pareto(results, path):
    """Final perplexity against MLP compression, one point per rank."""
    ok = [r for r in results if r.status == "ok"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot([r.mlp_compression for r in ok], [r.ppl for r in ok], marker="o")
        for r in ok:
            ax.annotate(f"k={r.rank}", (r.mlp_compression, r.ppl), textcoords="offset points", xytext=(4, 4))
        ax.set_xlabel("MLP compression (x)")
        ax.set_ylabel("final perplexity")
        return _save(fig, path)
