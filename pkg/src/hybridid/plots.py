"""Deterministic matplotlib figures rendered next to the delimited output.

All figures use the Agg backend and a fixed layout so re-running a stage
reproduces the image files byte for byte.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 110, "metadata": {"Software": None}}


def plot_correlation_matrix(report, path: Path) -> None:
    """Heatmap of the Pearson matrix with the screening threshold noted."""
    cols = list(report.columns)
    n = len(cols)
    fig, ax = plt.subplots(figsize=(1.0 + 0.55 * n, 0.8 + 0.55 * n))
    im = ax.imshow(report.matrix, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(n), cols, rotation=45, ha="right")
    ax.set_yticks(range(n), cols)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{report.matrix[i, j]:.2f}",
                    ha="center", va="center", fontsize=7)
    ax.set_title(f"Pearson correlations (|c| >= {report.tau:g} selected)")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_holdout_validation(
    times: np.ndarray,
    states_true: np.ndarray,
    states_hybrid: np.ndarray,
    flux_true: np.ndarray,
    flux_hybrid: np.ndarray,
    state_names: Sequence[str],
    flux_names: Sequence[str],
    path: Path,
) -> None:
    """States and fluxes of the hybrid against the truth model."""
    n_x, n_p = len(state_names), len(flux_names)
    rows = max(n_x, n_p)
    fig, axes = plt.subplots(rows, 2, figsize=(9, 2.2 * rows), squeeze=False)
    for j in range(n_x):
        ax = axes[j][0]
        ax.plot(times, states_true[:, j], "b--", label="truth")
        ax.plot(times, states_hybrid[:, j], "r-", label="hybrid")
        ax.set_ylabel(state_names[j])
        if j == 0:
            ax.legend(loc="best", fontsize=8)
    for j in range(n_p):
        ax = axes[j][1]
        ax.plot(times, flux_true[:, j], "b--")
        ax.plot(times, flux_hybrid[:, j], "r-")
        ax.set_ylabel(flux_names[j])
    for j in range(n_x, rows):
        axes[j][0].axis("off")
    for j in range(n_p, rows):
        axes[j][1].axis("off")
    axes[-1][0].set_xlabel("t")
    axes[-1][1].set_xlabel("t")
    fig.suptitle("Hybrid validation on the held-out MV profile")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_closed_loop(
    times: np.ndarray,
    states: np.ndarray,
    applied: np.ndarray,
    setpoint: float,
    state_names: Sequence[str],
    mv_names: Sequence[str],
    path: Path,
) -> None:
    """Controlled level, remaining states, and applied MV moves."""
    fig, axes = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    axes[0].plot(times, states[:, 1], "r-", label=state_names[1])
    axes[0].axhline(setpoint, color="k", linestyle=":", label="setpoint")
    axes[0].set_ylabel(state_names[1])
    axes[0].legend(loc="best", fontsize=8)
    for j, nm in enumerate(state_names):
        if j != 1:
            axes[1].plot(times, states[:, j], label=nm)
    axes[1].set_ylabel("other states")
    axes[1].legend(loc="best", fontsize=8)
    for j, nm in enumerate(mv_names):
        axes[2].step(times, applied[:, j], where="post", label=nm)
    axes[2].set_ylabel("applied MVs")
    axes[2].set_xlabel("t")
    axes[2].legend(loc="best", fontsize=8)
    fig.suptitle("Closed-loop tracking")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
