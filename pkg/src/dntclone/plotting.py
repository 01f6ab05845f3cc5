"""PNG figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_sweep(result: dict, path, title: str | None = None) -> Path:
    """Target (black) against clone prediction (red) along one pin sweep."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(result["input"], result["target"], color="black", lw=1.5, label="target")
    ax.plot(result["input"], result["prediction"], color="red", lw=1.2, ls="--", label="prediction")
    ax.set_xlabel(f"pin {result['pin']} (V)")
    ax.set_ylabel("output")
    ax.set_title(title or f"mode {result['mode']}: rel. RMSE {result['rel_rmse']:.3f}")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(rows: list[dict], path) -> Path:
    """Normalised cumulative work of both variants and the active fraction."""
    it = np.array([r["iter"] for r in rows])
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    top.plot(it, [r["baseline_norm_cum"] for r in rows], color="red", label="without active learning")
    top.plot(it, [r["active_norm_cum"] for r in rows], color="blue", label="with active learning")
    top.set_yscale("log")
    top.set_ylabel("normalised cumulative work")
    top.legend()
    bottom.plot(it, 100.0 * np.array([r["active_fraction"] for r in rows]), color="blue")
    bottom.set_ylim(0, 105)
    bottom.set_xlabel("iteration")
    bottom.set_ylabel("active networks (%)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_report(rows: list[dict], path) -> Path:
    """Active fraction and mean slot loss per training iteration."""
    it = np.array([r["iteration"] for r in rows])
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    top.plot(it, [r["active_fraction"] for r in rows], color="blue")
    top.set_ylabel("active fraction")
    top.set_ylim(0, 1.05)
    bottom.semilogy(it, [r["mean_loss"] for r in rows], color="black", label="mean")
    bottom.semilogy(it, [r["max_loss"] for r in rows], color="grey", lw=0.8, label="max")
    bottom.set_xlabel("iteration")
    bottom.set_ylabel("normalised loss")
    bottom.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
