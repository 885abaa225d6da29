"""Evaluation metrics for Gaussian predictive distributions.

* NLL: per-point mean Gaussian negative log-likelihood (shared
  implementation with the calibration module, so the two never disagree).
* CRPS: the closed form for a Gaussian,
  ``sigma * (z * (2*Phi(z) - 1) + 2*phi(z) - 1/sqrt(pi))``.
* CQM: mean absolute centered-interval coverage error over the quantile
  grid ``alpha_k = k / (grid + 1)``, k = 1..grid (default grid 99).

Reports are assembled in original target units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import persist
from .calibrate import gaussian_nll
from .dataio import Dataset, Standardizer
from .errors import ConfigurationError, DomainError, ShapeError
from .gpact import VARIANCE_FLOOR, GapaModel
from .propagate import predict_rows

__all__ = [
    "DEFAULT_CQM_GRID",
    "MetricsReport",
    "coverage_curve",
    "cqm",
    "crps_gaussian",
    "evaluate",
    "load_report",
    "save_report",
]

REPORT_FORMAT_VERSION = "gapa.metrics/1"

DEFAULT_CQM_GRID = 99

INV_SQRT_PI = 1.0 / np.sqrt(np.pi)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def crps_gaussian(mu: float, sigma: float, y: float) -> float:
    """Continuous ranked probability score of a Gaussian forecast.

    ``sigma * (z*(2*Phi(z)-1) + 2*phi(z) - 1/sqrt(pi))`` with
    ``z = (y - mu)/sigma``; nonnegative, and approaching ``|y - mu|`` for
    far misses.
    """
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise DomainError(f"crps needs sigma > 0, got {sigma}")
    z = (y - mu) / sigma
    phi = INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return float(sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * phi - INV_SQRT_PI))


def _alphas(grid: int):
    if grid < 1:
        raise ConfigurationError(f"quantile grid must have at least 1 level, got {grid}")
    return np.arange(1, grid + 1) / (grid + 1.0)


def _abs_standardized_errors(preds, targets):
    preds = list(preds)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (len(preds),):
        raise ShapeError(f"{len(preds)} predictions but target shape {targets.shape}")
    if not preds:
        raise ConfigurationError("no predictions to evaluate")
    means = np.array([p.mean for p in preds])
    variances = np.array([p.variance for p in preds])
    if float(variances.min()) <= 0.0:
        raise DomainError(f"non-positive predictive variance {float(variances.min()):.6e}")
    return np.abs(targets - means) / np.sqrt(variances)


def coverage_curve(preds, targets, grid: int = DEFAULT_CQM_GRID):
    """Empirical coverage of the centered intervals at each grid level.

    The centered alpha-interval is ``mu +- sigma * Phi^-1((1+alpha)/2)``;
    a target on the boundary counts as covered.  Returns (alphas,
    empirical coverage); both are invariant to the point order.
    """
    t = np.sort(_abs_standardized_errors(preds, targets))
    alphas = _alphas(grid)
    thresholds = ndtri((1.0 + alphas) / 2.0)
    covered = np.searchsorted(t, thresholds, side="right")
    return alphas, covered / t.size


def cqm(preds, targets, grid: int = DEFAULT_CQM_GRID) -> float:
    """Mean absolute centered-interval coverage error over the alpha grid."""
    alphas, empirical = coverage_curve(preds, targets, grid)
    return float(np.mean(np.abs(empirical - alphas)))


@dataclass(frozen=True)
class MetricsReport:
    """Per-point-mean NLL and CRPS, CQM, and the point count (original units)."""

    nll: float
    crps: float
    cqm: float
    n_points: int
    warning: str | None = None

    def __post_init__(self) -> None:
        if not (np.isfinite(self.nll) and np.isfinite(self.crps) and np.isfinite(self.cqm)):
            raise DomainError(f"non-finite metrics report {self}")
        if self.n_points < 1:
            raise ConfigurationError("metrics report needs at least one point")
        if not 0.0 <= self.cqm <= 0.5 + 1e-12:
            raise DomainError(f"cqm {self.cqm} outside its analytic range")


def evaluate(
    model: GapaModel,
    test: Dataset,
    standardizer: Standardizer | None = None,
    *,
    grid: int = DEFAULT_CQM_GRID,
) -> MetricsReport:
    """Score a calibrated model on a held-out dataset in original units.

    Predictions come from gapa_forward row by row; the NLL floor is the
    calibrated variance floor mapped through the standardizer, and points
    sitting exactly on it are flagged in the warning field.
    """
    if model.state.calibration is None:
        raise ConfigurationError("evaluate requires a calibrated model (free or variational)")
    preds = predict_rows(
        model.network,
        model.layer,
        model.state.calibration,
        test.features,
        model.state.propagation_mode,
        standardizer=standardizer,
    )
    floor = (
        standardizer.target_std**2 * VARIANCE_FLOOR if standardizer is not None else VARIANCE_FLOOR
    )
    means = np.array([p.mean for p in preds])
    variances = np.array([p.variance for p in preds])
    value = gaussian_nll(means, variances, test.targets, floor=floor)
    crps_terms = np.array(
        [crps_gaussian(p.mean, np.sqrt(p.variance), y) for p, y in zip(preds, test.targets)]
    )
    crps_mean = float(np.sum(np.sort(crps_terms)) / crps_terms.size)
    floored = int(np.count_nonzero([p.standardized_variance == VARIANCE_FLOOR for p in preds]))
    warning = f"{floored} prediction(s) at the variance floor" if floored else None
    return MetricsReport(
        nll=value.mean,
        crps=crps_mean,
        cqm=cqm(preds, test.targets, grid),
        n_points=value.n_points,
        warning=warning,
    )


def save_report(report: MetricsReport, path, *, config_digest: str | None = None) -> None:
    doc: dict = {
        "version": REPORT_FORMAT_VERSION,
        "nll": float(report.nll),
        "crps": float(report.crps),
        "cqm": float(report.cqm),
        "n_points": report.n_points,
    }
    if config_digest is not None:
        doc["config_digest"] = config_digest
    persist.save_document(doc, path)


def load_report(path) -> MetricsReport:
    doc = persist.load_document(path, REPORT_FORMAT_VERSION)
    return MetricsReport(
        nll=float(doc["nll"]),
        crps=float(doc["crps"]),
        cqm=float(doc["cqm"]),
        n_points=int(doc["n_points"]),
    )
