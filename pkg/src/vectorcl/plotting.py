"""Figure rendering for run reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_trace(records: Sequence[dict], path) -> Path:
    it = [r["iter"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for key in ("l_vec", "l_total"):
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            axes[0].plot(it, [np.nan if v is None else v for v in vals], lw=1, label=key)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].legend(frameon=False)
    con = [r.get("l_con") for r in records]
    if any(v is not None for v in con):
        axes[1].plot(it, [np.nan if v is None else v for v in con], lw=1, color="C2")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("l_con")
    return _save(fig, path)


def plot_warped_views(x_a: np.ndarray, x_b: np.ndarray, warped: Sequence[np.ndarray], path) -> Path:
    """``x_a``, each level's ``warp(x_a, psi_l)`` and the target ``x_b``, side by side."""
    panels = [("x_a", x_a)] + [(f"level {k}", w) for k, w in enumerate(warped)] + [("x_b", x_b)]
    fig, axes = plt.subplots(1, len(panels), figsize=(1.9 * len(panels), 2.2))
    for ax, (title, img) in zip(np.atleast_1d(axes), panels):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    return _save(fig, path)


def plot_flops(rows: Sequence[Dict[str, float]], path) -> Path:
    """Direct and chained multiply-adds against the receptive-field side."""
    rf = [r["rf"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    ax.semilogy(rf, [r["direct"] for r in rows], "o-", label="direct window")
    ax.semilogy(rf, [r["vpa"] for r in rows], "s-", label="pyramid chain")
    ax.set_xlabel("receptive field side (px)")
    ax.set_ylabel("multiply-adds per image")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_probe(rows: Sequence[dict], path) -> Path:
    seeds = [r["seed"] for r in rows]
    x = np.arange(len(seeds))
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.bar(x - 0.2, [r["dice_pretrained"] for r in rows], 0.4, label="pretrained")
    ax.bar(x + 0.2, [r["dice_random"] for r in rows], 0.4, label="random init")
    ax.set_xticks(x, [str(s) for s in seeds])
    ax.set_xlabel("probe seed")
    ax.set_ylabel("test Dice")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_dispersion(maps: Dict[str, np.ndarray], path) -> Path:
    """One panel per named delta map, shared color scale."""
    vmax = max(float(np.max(m)) for m in maps.values()) or 1.0
    fig, axes = plt.subplots(1, len(maps), figsize=(3.2 * len(maps), 3))
    im = None
    for ax, (name, m) in zip(np.atleast_1d(axes), maps.items()):
        im = ax.imshow(m, cmap="magma", vmin=0, vmax=vmax)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.colorbar(im, ax=list(np.atleast_1d(axes)), shrink=0.8)
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)
    return Path(path)
