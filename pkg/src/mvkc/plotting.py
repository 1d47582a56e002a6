"""Matplotlib figures written next to the CLI's delimited/JSON reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def acc_curve(errors_deg, path, label: str | None = None, max_theta: float = math.pi / 2):
    """Accuracy at theta as a function of theta (radians)."""
    errs = np.sort(np.asarray(errors_deg, dtype=np.float64))
    theta = np.linspace(0.0, max_theta, 181)
    acc = np.searchsorted(errs, np.degrees(theta), side="left") / max(len(errs), 1)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(theta, acc, lw=1.8, label=label)
    for t, name in ((math.pi / 12, r"$\pi/12$"), (math.pi / 8, r"$\pi/8$"), (math.pi / 6, r"$\pi/6$")):
        ax.axvline(t, color="0.7", lw=0.8, ls="--")
        ax.text(t, 0.02, name, fontsize=8, ha="right", rotation=90, color="0.4")
    ax.set_xlabel(r"$\theta$ (rad)")
    ax.set_ylabel(r"Acc$_\theta$")
    ax.set_xlim(0, max_theta)
    ax.set_ylim(0, 1.02)
    if label:
        ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def view_ablation(views, med_errs, accs, path):
    """MedErr and Acc_pi/6 against the number of rendered views."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(views, med_errs, "o-", color="C0")
    ax.set_xlabel("number of views $m$")
    ax.set_ylabel("MedErr (deg)", color="C0")
    ax.set_xticks(list(views))
    ax2 = ax.twinx()
    ax2.plot(views, accs, "s--", color="C3")
    ax2.set_ylabel(r"Acc$_{\pi/6}$", color="C3")
    ax2.set_ylim(0, 1.02)
    return _save(fig, path)


def correspondence_grid(maps, path, titles=None, cols: int | None = None):
    """Tile a stack of correspondence maps, one panel per channel."""
    maps = np.asarray(maps)
    n = len(maps)
    cols = cols or min(n, 5)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.0 * rows), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(maps[i], cmap="inferno", interpolation="nearest")
            if titles is not None:
                ax.set_title(titles[i], fontsize=7)
    return _save(fig, path)


def loss_trace(trace, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(np.arange(1, len(trace) + 1), trace, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("contrastive loss")
    ax.set_yscale("log")
    return _save(fig, path)
