"""Figures written next to the CSV artifacts.

Uses the non-interactive Agg backend; every function saves one PNG and
returns its path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata without a timestamp keeps figures byte-stable between runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def loss_history(history: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    epochs = [row["epoch"] for row in history]
    for key in ("total", "l17b", "l17d", "l17e", "l17f"):
        ys = [row.get(key) for row in history]
        if any(y is not None for y in ys):
            ax.semilogy(epochs, [np.nan if y is None else y for y in ys], label=key, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def tpbvp(t, x, u, lam, x_r, path) -> Path:
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(6.4, 6.0))
    axes[0].plot(t, x[:, 0], label="x0")
    axes[0].plot(t, x[:, 1], label="x1")
    axes[0].axhline(float(np.atleast_1d(x_r)[0]), color="k", ls=":", lw=1, label="x_r")
    axes[1].plot(t, u, color="C3", label="u")
    axes[2].plot(t, lam[:, 0], label="lambda0")
    axes[2].plot(t, lam[:, 1], label="lambda1")
    for ax in axes:
        ax.legend(fontsize=8, loc="best")
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("t")
    return _save(fig, path)


def closed_loop(traj, path, title: str | None = None) -> Path:
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7.2, 6.4))
    axes[0].plot(traj.t, traj.x[:, 0], label="x0")
    axes[0].step(traj.t, traj.x_ref, where="post", color="k", ls=":", lw=1, label="x_r")
    axes[0].plot(traj.t, traj.x[:, 1], label="x1", alpha=0.7)
    obs = np.asarray(traj.observed, dtype=bool)
    if obs.sum() <= 200:
        for t0 in np.asarray(traj.t)[obs]:
            axes[0].axvline(t0, color="0.85", lw=0.5, zorder=0)
    axes[1].plot(traj.t, traj.u, color="C3", lw=1, label="u")
    if np.isfinite(traj.lam).any():
        axes[2].plot(traj.t, traj.lam[:, 0], lw=1, label="lambda0")
        axes[2].plot(traj.t, traj.lam[:, 1], lw=1, label="lambda1")
    for ax in axes:
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8, loc="best")
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("t")
    if title:
        axes[0].set_title(title)
    return _save(fig, path)


def comparison(rows: Sequence[dict], path) -> Path:
    labels = [f"{r['controller']} ({r['sampling_period']})" for r in rows]
    y = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6.4, 0.5 * len(rows) + 1.5))
    ax.barh(y - 0.2, [r["J"] for r in rows], height=0.4, label="J")
    ax.barh(y + 0.2, [r["tracking"] for r in rows], height=0.4, label="tracking")
    ax.set_yticks(y, labels)
    ax.invert_yaxis()
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="x")
    fig.tight_layout()
    return _save(fig, path)
