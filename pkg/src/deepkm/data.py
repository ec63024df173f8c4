"""Tabular regression dataset ingestion, standardization, and splitting.

CSV files must be rectangular and numeric with a header row.  All arrays are
numpy float64; the input Gram matrix helper returns a torch tensor to match
the rest of the library.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .matrices import DTYPE, InvalidInputError, gram_from_features


@dataclass
class Dataset:
    """Feature matrix ``x`` (P x d) and target matrix ``y`` (P x m)."""

    x: np.ndarray
    y: np.ndarray
    name: str = ""
    feature_means: np.ndarray | None = None
    feature_stds: np.ndarray | None = None
    target_means: np.ndarray | None = None
    target_stds: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.x.ndim != 2 or self.y.ndim != 2:
            raise InvalidInputError("x and y must be 2-d arrays")
        if self.x.shape[0] != self.y.shape[0]:
            raise InvalidInputError("x and y must have the same number of rows")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise InvalidInputError("dataset contains NaN or Inf values")

    @property
    def size(self) -> int:
        return self.x.shape[0]


@dataclass
class Split:
    """Disjoint covering train/test index lists, deterministic given seed."""

    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int = 0
    fraction: float = 0.9

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=int)
        self.test_indices = np.asarray(self.test_indices, dtype=int)
        overlap = np.intersect1d(self.train_indices, self.test_indices)
        if overlap.size:
            raise InvalidInputError("train and test indices overlap")


def load_csv(path, target_columns) -> Dataset:
    """Parse a numeric CSV with header; the named columns become targets.

    ``target_columns`` may be column names or integer positions.  A
    non-numeric cell raises with its row and column location.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InvalidInputError(
                    f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}")
            parsed = []
            for col, cell in zip(header, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise InvalidInputError(
                        f"{path}: non-numeric cell at row {line_no}, column {col!r}") from None
                if not np.isfinite(value):
                    raise InvalidInputError(
                        f"{path}: non-finite cell at row {line_no}, column {col!r}")
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)

    target_idx = []
    for tc in target_columns:
        if isinstance(tc, int):
            if not -len(header) <= tc < len(header):
                raise InvalidInputError(f"{path}: target column index {tc} out of range")
            target_idx.append(tc % len(header))
        else:
            if tc not in header:
                raise InvalidInputError(f"{path}: target column {tc!r} not in header")
            target_idx.append(header.index(tc))
    if not target_idx:
        raise InvalidInputError("need at least one target column")
    feature_idx = [i for i in range(len(header)) if i not in target_idx]
    if not feature_idx:
        raise InvalidInputError("no feature columns left after removing targets")
    import os
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(x=data[:, feature_idx], y=data[:, target_idx], name=name)


def make_split(n: int, seed: int, fraction: float = 0.9) -> Split:
    """Seeded random train/test split covering ``range(n)``."""
    if not 0 < fraction < 1:
        raise InvalidInputError("split fraction must lie in (0, 1)")
    if n < 2:
        raise InvalidInputError("need at least two rows to split")
    perm = np.random.default_rng(seed).permutation(n)
    cut = max(1, min(n - 1, int(round(fraction * n))))
    return Split(train_indices=np.sort(perm[:cut]), test_indices=np.sort(perm[cut:]),
                 seed=seed, fraction=fraction)


def standardize(dataset: Dataset, split: Split | None = None) -> Dataset:
    """Z-score features and targets using training-portion statistics only.

    Zero-variance columns are left unscaled (std forced to 1) with a warning.
    The fitted statistics are stored on the returned dataset so predictions
    can be mapped back to original units.
    """
    train = split.train_indices if split is not None else np.arange(dataset.size)

    def stats(a):
        mean = a[train].mean(axis=0)
        std = a[train].std(axis=0)
        bad = std < 1e-12
        if bad.any():
            warnings.warn(f"zero-variance columns {np.flatnonzero(bad).tolist()} left unscaled")
            std = np.where(bad, 1.0, std)
        return mean, std

    fm, fs = stats(dataset.x)
    tm, ts = stats(dataset.y)
    return Dataset(x=(dataset.x - fm) / fs, y=(dataset.y - tm) / ts, name=dataset.name,
                   feature_means=fm, feature_stds=fs, target_means=tm, target_stds=ts)


def destandardize_targets(dataset: Dataset, y) -> np.ndarray:
    """Map standardized target values back to original units."""
    if dataset.target_means is None or dataset.target_stds is None:
        raise InvalidInputError("dataset carries no target statistics")
    return np.asarray(y, dtype=float) * dataset.target_stds + dataset.target_means


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InvalidInputError("prediction and truth shapes differ")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def input_gram(x) -> torch.Tensor:
    """Input second-moment matrix ``G_0 = (1/d) X X^T``."""
    x = np.asarray(x, dtype=float)
    return gram_from_features(torch.as_tensor(x, dtype=DTYPE), n=x.shape[1])


def take(dataset: Dataset, indices) -> Dataset:
    return replace(dataset, x=dataset.x[indices], y=dataset.y[indices])


def subset(dataset: Dataset, n: int, seed: int | None = None, mode: str = "first") -> Dataset:
    """First-n rows (``mode='first'``) or a seeded random selection (``mode='random'``)."""
    if n > dataset.size:
        raise InvalidInputError(f"subset size {n} exceeds dataset size {dataset.size}")
    if mode == "first":
        idx = np.arange(n)
    elif mode == "random":
        idx = np.sort(np.random.default_rng(seed).choice(dataset.size, size=n, replace=False))
    else:
        raise InvalidInputError(f"unknown subset mode {mode!r}")
    return take(dataset, idx)


# ---------------------------------------------------------------------------
# Deterministic synthetic stand-ins for the UCI regression tables.  The row
# counts and column counts match the real files so experiment configs carry
# over unchanged when real data is dropped in.
# ---------------------------------------------------------------------------

def _synthetic_regression(rows: int, cols: int, seed: int, name: str) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, cols))
    w1 = rng.standard_normal((cols, 16)) / np.sqrt(cols)
    w2 = rng.standard_normal(16)
    hidden = np.tanh(x @ w1)
    y = hidden @ w2 + 0.3 * np.sin(2 * x[:, 0]) + 0.1 * rng.standard_normal(rows)
    return Dataset(x=x, y=y[:, None], name=name)


SYNTHETIC_DATASETS = {
    "yacht": dict(rows=308, cols=6, seed=20240308),
    "energy": dict(rows=768, cols=8, seed=20240768),
}


def synthetic_dataset(name: str) -> Dataset:
    """Fixed-seed synthetic dataset mirroring a named benchmark's shape."""
    try:
        kw = SYNTHETIC_DATASETS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown synthetic dataset {name!r}; choices: {sorted(SYNTHETIC_DATASETS)}") from None
    return _synthetic_regression(kw["rows"], kw["cols"], kw["seed"], name)


def save_csv(dataset: Dataset, path):
    """Write the dataset as a numeric CSV with x columns then y columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.x.shape[1])]
                        + [f"y{i}" for i in range(dataset.y.shape[1])])
        for xi, yi in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])
