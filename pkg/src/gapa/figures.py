"""Figure rendering for prediction bands and calibration curves.

Uses the Agg backend so rendering works headless; every function writes a
PNG to the given path and returns that path.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ShapeError

__all__ = ["coverage_figure", "uncertainty_band_figure"]


def uncertainty_band_figure(
    x,
    mean,
    lower,
    upper,
    path,
    *,
    train_x=None,
    train_y=None,
    title: str = "Predictive mean and 2-sigma band",
):
    """Mean curve with a shaded lower/upper band over a 1-D input grid."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not (x.shape == mean.shape == lower.shape == upper.shape) or x.ndim != 1:
        raise ShapeError("band inputs must be equal-length 1-D arrays")
    fig, ax = plt.subplots(figsize=(8.0, 5.0))
    ax.fill_between(x, lower, upper, alpha=0.3, color="tab:blue", label="band")
    ax.plot(x, mean, color="tab:blue", linewidth=1.5, label="mean")
    if train_x is not None and train_y is not None:
        ax.scatter(
            np.asarray(train_x, dtype=float),
            np.asarray(train_y, dtype=float),
            s=8,
            color="black",
            alpha=0.5,
            label="train",
        )
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def coverage_figure(alphas, empirical, path, *, title: str = "Centered-interval calibration"):
    """Empirical coverage against the nominal level, with the ideal diagonal."""
    alphas = np.asarray(alphas, dtype=float)
    empirical = np.asarray(empirical, dtype=float)
    if alphas.shape != empirical.shape or alphas.ndim != 1:
        raise ShapeError("coverage inputs must be equal-length 1-D arrays")
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    ax.plot([0.0, 1.0], [0.0, 1.0], color="gray", linestyle="--", linewidth=1.0, label="ideal")
    ax.plot(alphas, empirical, color="tab:red", linewidth=1.5, label="empirical")
    ax.set_xlabel("nominal coverage")
    ax.set_ylabel("empirical coverage")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
