"""CSV ingestion, sliding windows, min-max normalization, synthetic series.

Windows are 24 consecutive steps: 23 predictor steps and one target step.
The split is chronological; normalization statistics come from the training
rows only and are applied to both splits, with values clipped into [0, 1]
(only test rows outside the training range are affected).  Windows never
straddle the split boundary.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._serialize import read_arrays, write_arrays
from .seeding import philox

WINDOW = 24
PREDICTOR_STEPS = WINDOW - 1

SYNTH_KINDS = ("sine", "trend", "square")

# Steps between label flips of the square-wave classification series.
SQUARE_FLIP_PERIOD = 50


class DataError(ValueError):
    """Dataset cannot be ingested or windowed as requested."""


@dataclass(frozen=True)
class CsvSchema:
    """Names of the numeric value column(s) and optional 0/1 label column."""

    value_columns: tuple[str, ...]
    label_column: str | None = None

    def __post_init__(self):
        if not self.value_columns:
            raise DataError("schema needs at least one value column")


@dataclass
class RawSeries:
    name: str
    values: np.ndarray                      # (T, C)
    labels: np.ndarray | None = None        # (T,) for classification sources
    rejected: int = 0                       # rows dropped during ingestion


@dataclass(frozen=True)
class NormStats:
    """Per-channel training-split min/max; degenerate channels map to 0.5."""

    mins: np.ndarray
    maxs: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.maxs == self.mins

    def normalize(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.degenerate, 1.0, self.maxs - self.mins)
        out = (values - self.mins) / span
        return np.where(self.degenerate, 0.5, out)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.degenerate, 1.0, self.maxs - self.mins)
        return np.where(self.degenerate, self.mins, values * span + self.mins)


@dataclass
class WindowedDataset:
    task: str                               # "regression" | "classification"
    X: np.ndarray                           # (N, 23, C), in [0, 1]
    y: np.ndarray                           # (N, 1); [0, 1] or {0, 1}
    stats: NormStats
    name: str = ""

    def __len__(self):
        return len(self.X)

    @property
    def channels(self) -> int:
        return self.X.shape[2]

    def subset(self, n: int) -> "WindowedDataset":
        return WindowedDataset(self.task, self.X[:n], self.y[:n], self.stats, self.name)


def window_count(length: int) -> int:
    """Stride-1 window count for a series of ``length`` rows."""
    return max(0, length - WINDOW + 1)


def load_csv(path, schema: CsvSchema, name: str | None = None) -> RawSeries:
    """Read an ordered series, dropping rows with non-numeric cells.

    Raises :class:`DataError` for a missing file or column, or when fewer
    than 24 usable rows remain.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    needed = list(schema.value_columns) + (
        [schema.label_column] if schema.label_column else [])
    rows: list[list[float]] = []
    labels: list[float] = []
    rejected = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in needed:
            if col not in header:
                raise DataError(f"missing column {col!r} in {path}")
        for record in reader:
            try:
                vals = [float(record[c]) for c in schema.value_columns]
                lab = float(record[schema.label_column]) if schema.label_column else None
            except (TypeError, ValueError):
                rejected += 1
                continue
            rows.append(vals)
            if lab is not None:
                labels.append(lab)
    if len(rows) < WINDOW:
        raise DataError(f"fewer than {WINDOW} usable rows in {path} (got {len(rows)})")
    if rejected:
        warnings.warn(f"{path}: rejected {rejected} rows with non-numeric cells")
    return RawSeries(
        name=name or path.stem,
        values=np.asarray(rows, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.float64) if schema.label_column else None,
        rejected=rejected,
    )


def _window_block(values: np.ndarray) -> np.ndarray:
    """(rows, C) -> (N, 24, C) stride-1 windows."""
    win = np.lib.stride_tricks.sliding_window_view(values, WINDOW, axis=0)
    return np.ascontiguousarray(win.transpose(0, 2, 1))


def _make_split(values, labels, stats, task, name) -> WindowedDataset:
    if window_count(len(values)) < 1:
        raise DataError(f"{name}: split shorter than one {WINDOW}-step window")
    norm = np.clip(stats.normalize(values), 0.0, 1.0)
    block = _window_block(norm)
    X = block[:, :PREDICTOR_STEPS, :]
    if task == "classification":
        y = labels[WINDOW - 1:len(values)][:len(X)].reshape(-1, 1)
        bad = ~((y == 0.0) | (y == 1.0))
        if bad.any():
            raise DataError(f"{name}: classification labels must be 0 or 1")
    else:
        y = block[:, WINDOW - 1, 0].reshape(-1, 1)
    return WindowedDataset(task, np.ascontiguousarray(X), y, stats, name)


def make_windows(series: RawSeries, split_fraction: float = 0.8
                 ) -> tuple[WindowedDataset, WindowedDataset]:
    """Chronological split, train-only normalization stats, stride-1 windows.

    The boundary sits at ``floor(T * split_fraction)``; training windows end
    on or before it and test windows start after it.
    """
    if not 0.0 < split_fraction < 1.0:
        raise DataError("split_fraction must lie strictly between 0 and 1")
    values = np.asarray(series.values, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    T = len(values)
    if T < 2 * WINDOW:
        raise DataError(f"series too short: need at least {2 * WINDOW} rows, got {T}")
    task = "classification" if series.labels is not None else "regression"
    if task == "regression" and values.shape[1] != 1:
        raise DataError("regression series must be univariate")
    boundary = int(T * split_fraction)
    train_vals, test_vals = values[:boundary], values[boundary:]
    labels = series.labels
    train_lab = labels[:boundary] if labels is not None else None
    test_lab = labels[boundary:] if labels is not None else None
    mins = train_vals.min(axis=0)
    maxs = train_vals.max(axis=0)
    stats = NormStats(mins=mins, maxs=maxs)
    if stats.degenerate.any():
        ch = int(np.argmax(stats.degenerate))
        warnings.warn(f"{series.name}: channel {ch} is constant on the training "
                      f"split; mapping it to 0.5")
    train = _make_split(train_vals, train_lab, stats, task, series.name)
    test = _make_split(test_vals, test_lab, stats, task, series.name)
    return train, test


def synth_series(kind: str, length: int, noise_sd: float = 0.0, seed: int = 0) -> RawSeries:
    """Deterministic synthetic series for desk-scale runs.

    sine   : 0.5 + 0.5*sin(2*pi*t/24), univariate regression.
    trend  : linear ramp 0 -> 1, univariate regression.
    square : two-level signal whose 0/1 label flips every 50 steps
             (classification; the level encodes the label).
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if length < 2 * WINDOW:
        raise DataError(f"length must be >= {2 * WINDOW}")
    t = np.arange(length, dtype=np.float64)
    labels = None
    if kind == "sine":
        v = 0.5 + 0.5 * np.sin(2.0 * np.pi * t / 24.0)
    elif kind == "trend":
        v = t / (length - 1)
    else:
        labels = ((t.astype(np.int64) // SQUARE_FLIP_PERIOD) % 2).astype(np.float64)
        v = 0.35 + 0.3 * labels
    if noise_sd > 0.0:
        v = v + philox(seed).normal(0.0, noise_sd, length)
    return RawSeries(name=kind, values=v.reshape(-1, 1), labels=labels)


# ---------------------------------------------------------------------------
# dataset cache

_DATASET_KIND = "windowed_dataset"


def save_dataset(path, dataset: WindowedDataset) -> None:
    write_arrays(path,
                 {"X": dataset.X, "y": dataset.y,
                  "mins": dataset.stats.mins, "maxs": dataset.stats.maxs},
                 {"kind": _DATASET_KIND, "task": dataset.task, "name": dataset.name})


def load_dataset(path) -> WindowedDataset:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != _DATASET_KIND:
        raise DataError(f"{path}: not a dataset cache")
    stats = NormStats(mins=arrays["mins"], maxs=arrays["maxs"])
    return WindowedDataset(meta["task"], arrays["X"], arrays["y"], stats, meta["name"])
