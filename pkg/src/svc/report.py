"""Figures written next to the text reports (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_metrics(names, vde, ffe, path) -> Path:
    """Grouped bars of per-file VDE and FFE."""
    with plt.rc_context(STYLE):
        n = len(names)
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * n + 2), 3.0))
        x = np.arange(n)
        ax.bar(x - 0.2, vde, 0.4, label="VDE")
        ax.bar(x + 0.2, ffe, 0.4, label="FFE")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("error fraction")
        ax.legend()
        return _save(fig, path)


def plot_training(records, path, keys=None) -> Path:
    """Loss components against step, log y-axis where every value is positive."""
    steps = np.array([r["step"] for r in records])
    if keys is None:
        skip = {"step", "regime", "lr", "clipped", "grad_norm_g", "grad_norm_d"}
        keys = sorted({k for r in records for k in r if k not in skip and isinstance(r[k], (int, float))})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        positive = True
        for k in keys:
            y = np.array([r.get(k, np.nan) for r in records], dtype=float)
            positive &= bool(np.all(y[np.isfinite(y)] > 0))
            ax.plot(steps, y, lw=1.0, label=k)
        if positive and keys:
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if keys:
            ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)
