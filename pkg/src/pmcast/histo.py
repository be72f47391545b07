"""Freedman-Diaconis histograms and class-balanced frequency weights."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from pmcast import _kernels

DEFAULT_BETA = 0.8
MAX_BINS = 200_000


class HistoError(ValueError):
    pass


def _finite(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size and np.isnan(x).all():
        raise HistoError("all values are NaN")
    return x[np.isfinite(x)]


def _fallback_width(x: np.ndarray) -> float:
    span = float(x.max() - x.min())
    return span + max(1e-12, 1e-9 * float(np.abs(x).max()))


def fd_bin_width(values) -> float:
    """2 * IQR * n^(-1/3), IQR from linearly interpolated quartiles.

    With zero IQR the width covers the whole sample plus a small epsilon,
    giving a single bin.
    """
    x = _finite(values)
    if x.size < 2:
        raise HistoError("need at least 2 finite values for a bin width")
    q1, q3 = np.percentile(x, [25.0, 75.0])
    iqr = float(q3 - q1)
    if iqr <= 0.0:
        return _fallback_width(x)
    return 2.0 * iqr * x.size ** (-1.0 / 3.0)


def class_balanced_weight(counts, beta: float) -> np.ndarray:
    """(1 - beta) / (1 - beta**count), and 0 where count == 0."""
    counts = np.asarray(counts, dtype=np.float64)
    out = np.zeros_like(counts)
    nz = counts > 0
    if beta == 0.0:
        out[nz] = 1.0
        return out
    # 1 - beta**n without cancellation near beta -> 1
    out[nz] = (1.0 - beta) / -np.expm1(counts[nz] * math.log(beta))
    return out


@dataclass
class FrequencyTable:
    channel: str
    bin_edges: np.ndarray
    counts: np.ndarray
    beta: float

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bin_edges.size != self.counts.size + 1:
            raise HistoError("len(bin_edges) must equal len(counts) + 1")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise HistoError("bin edges must be strictly increasing")
        if np.any(self.counts < 0):
            raise HistoError("counts must be non-negative")
        _check_beta(self.beta)
        self.weights = class_balanced_weight(self.counts, self.beta)

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    def with_beta(self, beta: float) -> "FrequencyTable":
        return FrequencyTable(self.channel, self.bin_edges, self.counts, beta)

    def bin_of(self, values) -> np.ndarray:
        return _kernels.bin_lookup(values, self.bin_edges)

    def weights_for(self, values) -> np.ndarray:
        """Weight of each value's bin; out-of-range values use the edge bins."""
        v = np.asarray(values, dtype=np.float64)
        if np.isnan(v).any():
            raise HistoError(f"NaN value passed to frequency lookup for {self.channel!r}")
        return self.weights[self.bin_of(v)]

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "beta": self.beta,
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrequencyTable":
        return cls(d["channel"], d["bin_edges"], d["counts"], d["beta"])

    def write_csv(self, path, clip: Optional[int] = None) -> None:
        """Edges, counts (optionally clipped for display) and weights per bin."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count", "count_display", "weight"])
            for i in range(self.n_bins):
                c = int(self.counts[i])
                shown = min(c, clip) if clip is not None else c
                w.writerow([repr(float(self.bin_edges[i])), repr(float(self.bin_edges[i + 1])),
                            c, shown, repr(float(self.weights[i]))])


def _check_beta(beta: float) -> None:
    if not (0.0 <= beta < 1.0):
        raise HistoError(f"beta must lie in [0, 1), got {beta}")


def fd_edges(values, max_bins: int = MAX_BINS) -> np.ndarray:
    x = _finite(values)
    if x.size == 0:
        raise HistoError("no finite values to bin")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        # a single bin just wide enough to hold the repeated value
        return np.array([lo, lo + _fallback_width(x)])
    width = fd_bin_width(x)
    n = int(math.ceil((hi - lo) / width))
    if n > max_bins:
        n = max_bins
        width = (hi - lo) / n
    n = max(n, 1)
    edges = lo + width * np.arange(n, dtype=np.float64)
    edges = edges[edges < hi]
    return np.append(edges, hi)


def build_frequency_table(values, beta: float = DEFAULT_BETA, channel: str = "",
                          max_bins: int = MAX_BINS) -> FrequencyTable:
    """Histogram the finite training values with FD-width bins covering [min, max]."""
    _check_beta(beta)
    x = _finite(values)
    if x.size == 0:
        raise HistoError(f"no finite training values for {channel!r}")
    edges = fd_edges(x, max_bins)
    idx = _kernels.bin_lookup(x, edges)
    counts = np.bincount(idx, minlength=edges.size - 1)
    return FrequencyTable(channel, edges, counts, beta)


def frequency_weight(value, table: FrequencyTable):
    w = table.weights_for(value)
    return float(w) if np.ndim(w) == 0 else w


def save_tables(tables: Mapping[str, FrequencyTable], path) -> None:
    Path(path).write_text(json.dumps({k: t.to_dict() for k, t in tables.items()}))


def load_tables(path) -> dict[str, FrequencyTable]:
    raw = json.loads(Path(path).read_text())
    return {k: FrequencyTable.from_dict(v) for k, v in raw.items()}
