"""Figures written next to the CLI's tabular output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PHASE_COLORS = {"adv": "tab:red", "tune": "tab:blue", "coef": "tab:green", "final": "tab:gray"}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(records, path, title="AdvTune"):
    """Test accuracy per epoch (colored by phase) and the phase losses."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 3.8))
    epochs = [r["epoch"] for r in records]
    acc = [r.get("test_acc") for r in records]
    if any(a is not None for a in acc):
        ax_acc.plot([e for e, a in zip(epochs, acc) if a is not None], [a for a in acc if a is not None],
                    color="k", lw=0.8)
        for phase, color in PHASE_COLORS.items():
            pts = [(r["epoch"], r["test_acc"]) for r in records if r["phase"] == phase and r.get("test_acc") is not None]
            if pts:
                ax_acc.scatter(*zip(*pts), s=14, color=color, label=phase, zorder=3)
        ax_acc.legend(fontsize=8)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("test accuracy")
    for key in ("loss_p", "loss_pr", "loss_pd", "adv"):
        pts = [(r["epoch"], r[key]) for r in records if r.get(key) is not None]
        if pts:
            ax_loss.plot(*zip(*pts), marker=".", lw=0.8, label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    if ax_loss.lines:
        ax_loss.legend(fontsize=8)
    fig.suptitle(title)
    return _save(fig, path)


def accuracy_bars(labels, values, path, title="", ylabel="accuracy"):
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(labels) + 1.5), 3.5))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel(ylabel)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=7)
    ax.set_title(title)
    return _save(fig, path)


def sweep_lines(series: dict, path, xlabel="sigma", ylabel="accuracy", title=""):
    """series: name -> [(x, y), ...]"""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in series.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def cloud_triplet(original, recovered, deformed, path, title=""):
    """Side-by-side scatter of P, P^r and P^d on shared axes."""
    clouds = [np.asarray(getattr(c, "points", c)) for c in (original, recovered, deformed)]
    lim = max(float(np.abs(c).max()) for c in clouds) or 1.0
    fig = plt.figure(figsize=(10, 3.6))
    for k, (cloud, name) in enumerate(zip(clouds, ("original", "recovered", "deformed"))):
        ax = fig.add_subplot(1, 3, k + 1, projection="3d")
        # x right, y up: plot (x, z, y) so the up axis is vertical
        ax.scatter(cloud[:, 0], cloud[:, 2], cloud[:, 1], s=2, c=cloud[:, 1], cmap="viridis")
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.set_zlim(-lim, lim)
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    fig.suptitle(title)
    return _save(fig, path)
