"""Sample matrices for one state, paired source/target inputs, and scaling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class Dataset:
    state_label: str
    feature_names: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        names = tuple(str(n) for n in self.feature_names)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise ValidationError("values must be a 2-D matrix")
        n, p = values.shape
        if n < 1 or p < 1:
            raise ValidationError(f"dataset must have n >= 1 and p >= 1, got {n}x{p}")
        if len(names) != p:
            raise ValidationError(f"{len(names)} feature names for {p} columns")
        seen = set()
        for name in names:
            if name in seen:
                raise ValidationError(f"duplicate feature name {name!r}")
            seen.add(name)
        if not np.all(np.isfinite(values)):
            r, c = np.argwhere(~np.isfinite(values))[0]
            raise ValidationError(f"non-finite value at row {r + 1}, column {names[c]}")
        values.setflags(write=False)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise ValidationError(f"feature {name!r} not in dataset") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def subset(self, names: Sequence[str]) -> "Dataset":
        idx = [self.index(n) for n in names]
        return Dataset(self.state_label, tuple(names), self.values[:, idx])

    def with_values(self, values: np.ndarray) -> "Dataset":
        return Dataset(self.state_label, self.feature_names, values)


@dataclass(frozen=True)
class Standardizer:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        if ds.feature_names != self.feature_names:
            raise ValidationError("feature names differ from the fitted standardizer")
        return ds.with_values((ds.values - self.mean) / self.scale)


@dataclass(frozen=True)
class StatePair:
    source: Dataset
    target: Dataset
    standardizer: Standardizer | None = None

    def __post_init__(self):
        check_same_features(self.source, self.target)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.source.feature_names

    @property
    def p(self) -> int:
        return self.source.p

    def pooled(self) -> Dataset:
        return Dataset("pooled", self.feature_names, np.vstack([self.source.values, self.target.values]))


def check_same_features(a: Dataset, b: Dataset) -> None:
    if a.feature_names == b.feature_names:
        return
    for i, (x, y) in enumerate(zip(a.feature_names, b.feature_names)):
        if x != y:
            raise ValidationError(f"feature mismatch at column {i + 1}: {x!r} vs {y!r}")
    raise ValidationError(f"feature count mismatch: {a.p} vs {b.p}")


def load_dataset(path: str | Path, state_label: str) -> Dataset:
    """Read a CSV with a header row of feature names and one numeric sample per row."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file (no header)")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    if not body:
        raise ValidationError(f"{path}: empty body")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        # file row number, counting the header as row 1
        rownum = i + 2
        if len(row) != len(header):
            raise ValidationError(f"{path}: ragged row {rownum}: {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ValidationError(
                    f"{path}: non-numeric cell {cell!r} at row {rownum}, column {header[j]}"
                ) from None
            if not math.isfinite(values[i, j]):
                raise ValidationError(f"{path}: non-finite cell at row {rownum}, column {header[j]}")
    return Dataset(state_label, tuple(header), values)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ds.feature_names)
        for row in ds.values:
            w.writerow([repr(float(v)) for v in row])


def feature_means(ds: Dataset) -> np.ndarray:
    return ds.values.mean(axis=0)


def fit_standardizer(pair: StatePair) -> Standardizer:
    pooled = np.vstack([pair.source.values, pair.target.values])
    mean = pooled.mean(axis=0)
    scale = pooled.std(axis=0)
    bad = [name for name, s in zip(pair.feature_names, scale) if not s > 0]
    if bad:
        raise ValidationError(f"zero pooled standard deviation for feature(s): {', '.join(bad)}")
    return Standardizer(pair.feature_names, mean, scale)


def standardize(pair: StatePair) -> StatePair:
    """Z-score both states with the pooled mean and population standard deviation."""
    st = fit_standardizer(pair)
    return StatePair(st.apply(pair.source), st.apply(pair.target), st)


def summary_records(ds: Dataset) -> list[dict]:
    means = ds.values.mean(axis=0)
    sds = ds.values.std(axis=0)
    return [
        {"feature": name, "mean": float(m), "sd": float(s)}
        for name, m, s in zip(ds.feature_names, means, sds)
    ]


def summary_json(ds: Dataset) -> str:
    return json.dumps(summary_records(ds), indent=2)
