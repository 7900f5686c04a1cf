"""Pulse datasets: filtering, index-window smoothing, splits and text persistence.

On disk a dataset is a CSV table with header ``alpha,theta_00..theta_31,infidelity``
and a JSON sidecar (``<name>.meta.json``) with system constants, generation
options and the target normalization scale. Floats are written with ``repr``
so a save/load round trip is bit exact.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_THETA = 32
HEADER = ["alpha"] + [f"theta_{k:02d}" for k in range(N_THETA)] + ["infidelity"]


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not match the expected schema."""


@dataclass
class Dataset:
    """Ordered ``(alpha, theta, infidelity)`` records plus free-form metadata."""

    alpha: np.ndarray
    theta: np.ndarray
    infidelity: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=float).reshape(len(self.alpha), -1) \
            if len(self.alpha) else np.zeros((0, N_THETA))
        self.infidelity = np.asarray(self.infidelity, dtype=float).reshape(-1)
        if self.theta.shape[1] != N_THETA:
            raise DatasetFormatError(f"theta must have {N_THETA} columns, got {self.theta.shape[1]}")
        if len(self.infidelity) != len(self.alpha):
            raise DatasetFormatError("infidelity and alpha lengths differ")
        if len(self.alpha) > 1 and np.any(np.diff(self.alpha) <= 0):
            raise DatasetFormatError("angles must be strictly increasing")

    def __len__(self) -> int:
        return len(self.alpha)

    def subset(self, idx) -> "Dataset":
        idx = np.sort(np.asarray(idx, dtype=int))
        return Dataset(self.alpha[idx], self.theta[idx], self.infidelity[idx], dict(self.meta))

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.alpha, other.alpha)
                and np.array_equal(self.theta, other.theta)
                and np.array_equal(self.infidelity, other.infidelity, equal_nan=True)
                and self.meta == other.meta)


def filter_by_infidelity(ds: Dataset, threshold: float = 1e-4) -> Dataset:
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    out = ds.subset(np.nonzero(ds.infidelity <= threshold)[0])
    out.meta["filter_threshold"] = threshold
    return out


def window_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving mean along axis 0, windows truncated at the edges.

    Even windows are widened by one so the window stays centered; a window
    longer than the data averages everything.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(values, dtype=float)
    n = len(values)
    if window > n and n:
        return np.broadcast_to(values.mean(axis=0), values.shape).copy()
    half = window // 2
    csum = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
    i = np.arange(n)
    lo = np.clip(i - half, 0, n)
    hi = np.clip(i + half + 1, 0, n)
    counts = (hi - lo).reshape((-1,) + (1,) * (values.ndim - 1))
    return (csum[hi] - csum[lo]) / counts


def smooth(ds: Dataset, window: int = 50, sys=None, level: int | None = None, cfg=None) -> Dataset:
    """Replace each theta by its index-window mean and recompute infidelities.

    The pre-smoothing infidelities are kept in ``meta["raw_infidelity"]``.
    Without ``sys`` (synthetic data) the stored infidelity becomes NaN.
    """
    if window == 1 or len(ds) == 0:
        return Dataset(ds.alpha, ds.theta.copy(), ds.infidelity.copy(), dict(ds.meta))
    theta = window_average(ds.theta, window)
    if sys is not None:
        from .dynamics import DEFAULT_CONFIG, batch_infidelity

        level = ds.meta.get("level", 2) if level is None else level
        infid = _chunked_infidelity(sys, theta, ds.alpha, level, cfg or DEFAULT_CONFIG, batch_infidelity)
    else:
        infid = np.full(len(ds), np.nan)
    meta = dict(ds.meta)
    meta["smooth_window"] = window
    meta["raw_infidelity"] = [float(x) for x in ds.infidelity]
    return Dataset(ds.alpha, theta, infid, meta)


def _chunked_infidelity(sys, theta, alpha, level, cfg, fn, chunk: int = 64):
    out = [fn(sys, theta[i:i + chunk], alpha[i:i + chunk], level, cfg)
           for i in range(0, len(theta), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Random disjoint train/val/test partition; each part keeps angle order."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions <= 0) or abs(fractions.sum() - 1) > 1e-9:
        raise ValueError("fractions must be three positive numbers summing to 1")
    n = len(ds)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    perm = np.random.default_rng(seed).permutation(n)
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return tuple(ds.subset(p) for p in parts)


def target_scale(ds: Dataset) -> float:
    """Normalization ``s = max |theta|`` so that ``theta / s`` lies in ``[-1, 1]``."""
    s = float(np.max(np.abs(ds.theta))) if len(ds) else 1.0
    return s if s > 0 else 1.0


def angle_grid(n: int) -> np.ndarray:
    """``alpha_i = -pi + (i + 1/2) 2 pi / n``: uniform over (-pi, pi), no duplicated endpoint."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return -np.pi + (np.arange(n) + 0.5) * 2 * np.pi / n


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".csv":
        path = path / "dataset.csv" if path.is_dir() or not path.suffix else path.with_suffix(".csv")
    return path, path.with_name(path.stem + ".meta.json")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save(ds: Dataset, path) -> Path:
    """Write ``ds`` as CSV plus metadata sidecar; returns the CSV path."""
    csv_path, meta_path = _paths(path)
    lines = [",".join(HEADER)]
    for a, th, f in zip(ds.alpha, ds.theta, ds.infidelity):
        lines.append(",".join(repr(float(x)) for x in (a, *th, f)))
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    meta = dict(ds.meta, n_records=len(ds))
    _atomic_write(meta_path, json.dumps(meta, indent=2, sort_keys=True))
    return csv_path


def load(path) -> Dataset:
    csv_path, meta_path = _paths(path)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{csv_path}: empty file") from None
        if header != HEADER:
            raise DatasetFormatError(
                f"{csv_path}: header has {len(header)} columns, expected {len(HEADER)} "
                f"({HEADER[0]},{HEADER[1]}..{HEADER[-2]},{HEADER[-1]})")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HEADER):
                raise DatasetFormatError(f"{csv_path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise DatasetFormatError(f"{csv_path}:{lineno}: {exc}") from None
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    expected = meta.pop("n_records", None)
    if expected is not None and expected != len(rows):
        raise DatasetFormatError(f"{csv_path}:{len(rows) + 2}: file ends after {len(rows)} records, "
                                 f"metadata promises {expected}")
    arr = np.array(rows, dtype=float).reshape(-1, len(HEADER))
    return Dataset(arr[:, 0], arr[:, 1:1 + N_THETA], arr[:, -1], meta)
