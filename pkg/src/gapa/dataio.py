"""Dataset ingestion, standardization, deterministic splitting, and the
synthetic gap generator used by the toy regression pipeline.

CSV files are comma-separated UTF-8 with a header row and decimal-point
reals; no quoting.  Leading lines starting with ``#`` are treated as
metadata comments and skipped, which is how pipeline artifacts embed their
configuration digest without disturbing the tabular schema.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, IngestionError

__all__ = [
    "Dataset",
    "SplitSpec",
    "Standardizer",
    "apply_standardizer",
    "fisher_yates_permutation",
    "fit_standardizer",
    "invert_target",
    "load_csv",
    "make_toy_gap",
    "save_csv",
    "split",
]


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus scalar regression targets."""

    features: NDArray[np.float64]
    targets: NDArray[np.float64]
    column_names: tuple[str, ...]
    target_name: str = "y"

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=float)
        targets = np.asarray(self.targets, dtype=float)
        if features.ndim != 2:
            raise IngestionError("features must be a 2-D matrix")
        if targets.ndim != 1 or targets.shape[0] != features.shape[0]:
            raise IngestionError("targets length must equal the number of feature rows")
        if len(self.column_names) != features.shape[1]:
            raise IngestionError("column_names length must equal the number of feature columns")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
            raise IngestionError("dataset contains NaN or Inf entries")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, indices: NDArray[np.integer]) -> "Dataset":
        return Dataset(
            features=self.features[indices],
            targets=self.targets[indices],
            column_names=self.column_names,
            target_name=self.target_name,
        )


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine transform fitted on training data only.

    Constant feature columns get std 1 so they map to zeros instead of
    dividing by zero.
    """

    feature_means: NDArray[np.float64]
    feature_stds: NDArray[np.float64]
    target_mean: float
    target_std: float


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for a deterministic train/val/test partition."""

    train_fraction: float
    val_fraction: float
    test_fraction: float
    seed: int

    def __post_init__(self) -> None:
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fractions):
            raise ConfigurationError(f"split fractions must lie in (0,1), got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must sum to 1, got {sum(fractions)!r}")


def load_csv(
    path: str | os.PathLike, target_column: str, *, missing_target_ok: bool = False
) -> Dataset:
    """Load a CSV file, taking every non-target column (in header order) as a
    feature.

    With ``missing_target_ok`` a file without the target column loads with
    all-zero targets (prediction inputs do not need labels).

    Raises
    ------
    IngestionError
        For a missing file, a header without ``target_column`` (unless
        allowed), or any cell that does not parse as a finite real
        (reported with its row and column).
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            lines = [line for line in fh if not line.startswith("#")]
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(lines))
    if not rows:
        raise IngestionError(f"{path} has no header row")
    header = [name.strip() for name in rows[0]]
    if target_column not in header and not missing_target_ok:
        raise IngestionError(f"target column {target_column!r} not found in header {header}")
    target_idx = header.index(target_column) if target_column in header else None
    feature_names = tuple(name for i, name in enumerate(header) if i != target_idx)

    features: list[list[float]] = []
    targets: list[float] = []
    for row_number, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise IngestionError(
                f"row {row_number}: expected {len(header)} cells, got {len(row)}"
            )
        parsed: list[float] = []
        for col_idx, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise IngestionError(
                    f"row {row_number}, column {header[col_idx]!r}: "
                    f"cannot parse {cell.strip()!r} as a real"
                ) from None
            if not np.isfinite(value):
                raise IngestionError(
                    f"row {row_number}, column {header[col_idx]!r}: non-finite value {cell.strip()!r}"
                )
            parsed.append(value)
        targets.append(parsed.pop(target_idx) if target_idx is not None else 0.0)
        features.append(parsed)
    if not features:
        raise IngestionError(f"{path} contains no data rows")
    return Dataset(
        features=np.asarray(features, dtype=float),
        targets=np.asarray(targets, dtype=float),
        column_names=feature_names,
        target_name=target_column,
    )


def save_csv(dataset: Dataset, path: str | os.PathLike, comments: tuple[str, ...] = ()) -> None:
    """Write a dataset as CSV; ``comments`` become leading ``#`` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        fh.write(",".join(dataset.column_names + (dataset.target_name,)) + "\n")
        for x_row, y in zip(dataset.features, dataset.targets):
            cells = [repr(float(v)) for v in x_row] + [repr(float(y))]
            fh.write(",".join(cells) + "\n")


def fisher_yates_permutation(n: int, seed: int) -> NDArray[np.intp]:
    """Fisher-Yates shuffle of ``range(n)`` driven by a PCG64 generator.

    The generator and sweep order are part of the split contract, so two
    implementations seeded identically produce identical partitions.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministically partition rows into train/val/test.

    Train and val sizes are rounded down; the remainder is the test set.
    """
    n = dataset.n_rows
    if n < 3:
        raise ConfigurationError(f"need at least 3 rows to split, got {n}")
    idx = fisher_yates_permutation(n, spec.seed)
    n_train = int(n * spec.train_fraction)
    n_val = int(n * spec.val_fraction)
    parts = (idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :])
    if any(len(p) == 0 for p in parts):
        raise ConfigurationError(
            f"split of {n} rows with fractions "
            f"({spec.train_fraction}, {spec.val_fraction}, {spec.test_fraction}) "
            "leaves an empty partition"
        )
    return tuple(dataset.take(p) for p in parts)  # type: ignore[return-value]


def fit_standardizer(train: Dataset) -> Standardizer:
    """Compute per-column means/stds (population convention) on train rows."""
    if train.n_rows == 0:
        raise ConfigurationError("cannot fit a standardizer on an empty dataset")
    means = train.features.mean(axis=0)
    stds = train.features.std(axis=0)
    stds = np.where(stds > 0.0, stds, 1.0)
    t_std = float(train.targets.std())
    return Standardizer(
        feature_means=means,
        feature_stds=stds,
        target_mean=float(train.targets.mean()),
        target_std=t_std if t_std > 0.0 else 1.0,
    )


def apply_standardizer(standardizer: Standardizer, dataset: Dataset) -> Dataset:
    """Map features and targets into standardized units."""
    return Dataset(
        features=(dataset.features - standardizer.feature_means) / standardizer.feature_stds,
        targets=(dataset.targets - standardizer.target_mean) / standardizer.target_std,
        column_names=dataset.column_names,
        target_name=dataset.target_name,
    )


def invert_target(standardizer: Standardizer, mean, variance):
    """Map a standardized target mean/variance back to original units."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    out_mean = standardizer.target_mean + standardizer.target_std * mean
    out_var = standardizer.target_std**2 * variance
    if mean.ndim == 0:
        return float(out_mean), float(out_var)
    return out_mean, out_var


def make_toy_gap(n: int, seed: int) -> Dataset:
    """Synthetic 1-D regression with a hole in the input support.

    x is uniform on [-3,-1] union [1,3] with equal mass per interval and
    y = sin(2x) + 0.1 * eps with standard normal eps.  The draw order
    (signs, magnitudes, noise) is fixed so the dataset is a pure function
    of (n, seed).
    """
    if n < 10:
        raise ConfigurationError(f"toy gap generator needs n >= 10, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    signs = 2.0 * rng.integers(0, 2, size=n).astype(float) - 1.0
    magnitudes = rng.uniform(1.0, 3.0, size=n)
    noise = rng.standard_normal(n)
    x = signs * magnitudes
    y = np.sin(2.0 * x) + 0.1 * noise
    return Dataset(
        features=x[:, None],
        targets=y,
        column_names=("x",),
        target_name="y",
    )
