"""Report figures.  Every function writes one PNG and returns its path."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(rows: Sequence[dict], path) -> Path:
    """L1 loss (log scale) and sparsity / saturation against epoch."""
    ep = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
        a.semilogy(ep, [r["L_SR"] for r in rows], color="k", lw=1)
        a.set_xlabel("epoch")
        a.set_ylabel("L1")
        for key, c in (("mean_sparsity", "C0"), ("eval_sparsity", "C1"),
                       ("mask_saturation", "C2"), ("tau", "0.5")):
            if key in rows[0]:
                b.plot(ep, [r[key] for r in rows], color=c, lw=1, label=key)
        b.set_xlabel("epoch")
        b.set_ylim(0, 1.05)
        b.legend(loc="lower right")
        return _save(fig, path)


def smm_sparsity_bars(per_smm: Sequence[float], path, label: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        k = np.arange(len(per_smm))
        ax.bar(k, per_smm, color="C0", width=0.6)
        ax.set_xticks(k, [f"SMM {i + 1}" for i in k])
        ax.set_ylim(0, 1)
        ax.set_ylabel("sparsity")
        if label:
            ax.set_title(label)
        return _save(fig, path)


def flops_vs_sparsity(sparsity: Sequence[float], ratio: Sequence[float], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(sparsity, ratio, "o-", color="C3", ms=3)
        ax.set_xlabel("aggregate sparsity")
        ax.set_ylabel("FLOPs / dense FLOPs")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        return _save(fig, path)


def channel_sparsity_hist(ratios: np.ndarray, path) -> Path:
    """Histogram of per-channel zero ratios of relu features."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(np.asarray(ratios).ravel(), bins=np.linspace(0, 1, 21), color="C0")
        ax.set_xlabel("fraction of zeros in channel")
        ax.set_ylabel("channels")
        return _save(fig, path)


def bench_bars(results: dict[str, float], path) -> Path:
    """Median milliseconds per mode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        names = list(results)
        ax.bar(names, [results[n] for n in names], color=["0.6", "C0", "C1"][: len(names)])
        ax.set_ylabel("median ms")
        return _save(fig, path)
