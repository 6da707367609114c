"""Figures written next to the JSON / text reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_SAVE = dict(dpi=100, metadata={"Software": None})


def plot_plans(plans: Sequence, path: str | Path, top: int = 12) -> Path:
    """Stacked compute / communication bars for the fastest plans."""
    plans = list(plans)[:top]
    labels = [f"{p.dp}x{p.tp}x{p.pp}" for p in plans]
    compute = [p.compute_time for p in plans]
    comm = [p.comm_time for p in plans]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(plans) + 2), 3.2))
    x = range(len(plans))
    ax.bar(x, compute, label="compute (incl. bubble)", color="#4c72b0")
    ax.bar(x, comm, bottom=compute, label="communication", color="#dd8452")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_xlabel("dp x tp x pp")
    ax.set_ylabel("predicted step time [s]")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path: str | Path, key: str = "loss",
                 title: str | None = None) -> Path:
    """Training curve; stage changes (if recorded) are marked with vertical lines."""
    steps = [h["step"] for h in history]
    values = [h[key] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, values, lw=1.0, color="#4c72b0")
    prev = None
    for h in history:
        stage = h.get("stage")
        if prev is not None and stage != prev:
            ax.axvline(h["step"], color="0.6", ls="--", lw=0.8)
        prev = stage
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path
