"""Matplotlib renderings of the exported report matrices (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(steps, loss, max_abs, lr, path, title: str = "") -> Path:
    """Loss (top) and max |activation| (bottom, log scale) against step."""
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(5.5, 4.5), sharex=True)
        ax0.plot(steps, loss, lw=1.0, color="tab:blue")
        ax0.set_ylabel("loss (nats)")
        axr = ax0.twinx()
        axr.plot(steps, lr, lw=0.8, color="0.6", ls="--")
        axr.set_ylabel("lr", color="0.5")
        ax1.plot(steps, max_abs, lw=1.0, color="tab:red")
        if np.all(np.asarray(max_abs) > 0):
            ax1.set_yscale("log")
        ax1.set_ylabel("max |h|")
        ax1.set_xlabel("step")
        if title:
            ax0.set_title(title)
        return _save(fig, path)


def plot_hidden_heatmap(matrix, dim_order, path, n_dims: int = 64) -> Path:
    """Mean |hidden| per token with dimensions sorted by overall magnitude (largest on the left)."""
    m = np.asarray(matrix)[:, :n_dims]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        im = ax.imshow(m, aspect="auto", cmap="Blues", interpolation="nearest")
        ticks = np.arange(0, m.shape[1], max(1, m.shape[1] // 8))
        ax.set_xticks(ticks)
        ax.set_xticklabels([str(int(dim_order[t])) for t in ticks], rotation=90)
        ax.set_xlabel("dimension (sorted)")
        ax.set_ylabel("token")
        fig.colorbar(im, ax=ax, label="mean |h|")
        return _save(fig, path)


def plot_attention_map(attn, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(np.asarray(attn), cmap="Reds", interpolation="nearest", vmin=0)
        ax.set_xlabel("key")
        ax.set_ylabel("query")
        fig.colorbar(im, ax=ax, label="attention")
        return _save(fig, path)


def plot_norm_weights(weights, path, pre_weights=None) -> Path:
    """One line per norm instance over dimensions, λ on top and λ₁ (if any) below."""
    rows = 2 if pre_weights is not None else 1
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, 1, figsize=(6, 2.4 * rows), squeeze=False)
        for w in np.asarray(weights):
            axes[0, 0].plot(w, lw=0.6, alpha=0.7)
        axes[0, 0].axhline(1.0, color="k", lw=0.5, ls=":")
        axes[0, 0].set_ylabel("norm weight")
        if pre_weights is not None:
            for w in np.asarray(pre_weights):
                axes[1, 0].plot(w, lw=0.6, alpha=0.7)
            axes[1, 0].axhline(1.0, color="k", lw=0.5, ls=":")
            axes[1, 0].set_ylabel("pre-affine weight")
        axes[-1, 0].set_xlabel("dimension")
        return _save(fig, path)
