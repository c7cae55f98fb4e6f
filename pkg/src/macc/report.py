"""Figure rendering for the CLI report path.

Every plot function takes already-computed rows/arrays and writes a PNG next
to the delimited output; nothing here recomputes metrics.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FLAG_COLOR = "crimson"


def plot_training_log(rows, columns, path, title=None, logy=True):
    """Generic per-epoch curves; `rows` is a list of dict-like records and
    `columns` the subset of keys to draw."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [r["epoch"] for r in rows]
    for col in columns:
        ax.plot(epochs, [r[col] for r in rows], label=col, lw=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_scan_panels(panels, path, max_panels=25, flag_threshold=0.25):
    """Grid of parameter-recovery scans: truth (dotted) vs recovered (solid),
    panels with R2 below the threshold outlined in red."""
    panels = panels[:max_panels]
    n = len(panels)
    ncol = int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(2.2 * ncol, 2.0 * nrow),
                             squeeze=False)
    for k, panel in enumerate(panels):
        ax = axes[k // ncol][k % ncol]
        ax.plot(panel["truth"], linestyle=":", color="k", lw=1.0)
        ax.plot(panel["recovered"], color="tab:blue", lw=1.2)
        ax.set_title(f"p{panel['dim']} R2={panel['r2']:.2f}", fontsize=7)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_ylim(-0.05, 1.05)
        if panel["r2"] < flag_threshold:
            for spine in ax.spines.values():
                spine.set_color(FLAG_COLOR)
                spine.set_linewidth(2.0)
    for k in range(n, nrow * ncol):
        axes[k // ncol][k % ncol].axis("off")
    fig.suptitle("parameter recovery through forward -> decode -> inverse", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_sweep(rows, path):
    """Val image MSE vs training fraction, one line per cycle weight
    (seed-averaged)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    lambdas = sorted({r["lambda_cyc"] for r in rows})
    for lam in lambdas:
        pts = {}
        for r in rows:
            if r["lambda_cyc"] == lam:
                pts.setdefault(r["fraction"], []).append(r["val_image_mse"])
        fr = sorted(pts)
        ax.plot(fr, [np.mean(pts[f]) for f in fr], marker="o",
                label=f"lambda_cyc={lam:g}")
    ax.set_xlabel("training fraction")
    ax.set_ylabel("val image MSE")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_member_scores(member_r2, path, flag_threshold=0.25):
    """Consistency R2 per held-out inverse ensemble member."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    idx = np.arange(len(member_r2))
    colors = [FLAG_COLOR if s < flag_threshold else "tab:blue" for s in member_r2]
    ax.bar(idx, member_r2, color=colors)
    ax.axhline(flag_threshold, color="gray", linestyle="--", lw=1.0)
    ax.set_xlabel("ensemble member")
    ax.set_ylabel("mean scan R2")
    ax.set_ylim(min(0.0, min(member_r2)) - 0.05, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
