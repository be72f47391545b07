"""Per-channel normalisation: z-score for weather, scaled log (+ z-score) for AQ."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

FLOOR = 1e-4
_LOG_FLOOR = math.log(FLOOR)

KINDS = ("zscore", "log_then_zscore", "log")


class TransformError(ValueError):
    pass


def scaled_log(x):
    """(log(max(x, 1e-4)) - log(1e-4)) / log(1e-4).

    The denominator is negative, so outputs are <= 0 and decrease as x grows
    past the floor.  Values below the floor (including negatives) map to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise TransformError("scaled_log received NaN input")
    return (np.log(np.maximum(x, FLOOR)) - _LOG_FLOOR) / _LOG_FLOOR


def inverse_scaled_log(y):
    y = np.asarray(y, dtype=np.float64)
    return np.exp(_LOG_FLOOR * (y + 1.0))


@dataclass
class NormStats:
    channels: list[str]
    kinds: list[str]
    mean: np.ndarray
    std: np.ndarray
    floor: float = FLOOR

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if not (len(self.channels) == len(self.kinds) == self.mean.size == self.std.size):
            raise TransformError("NormStats fields disagree in length")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise TransformError(f"unknown transform kinds {bad}")
        if np.any(self.std <= 0):
            raise TransformError("std must be positive for every channel")

    def subset(self, names: Sequence[str]) -> "NormStats":
        idx = [self.channels.index(n) for n in names]
        return NormStats([self.channels[i] for i in idx], [self.kinds[i] for i in idx],
                         self.mean[idx], self.std[idx], self.floor)

    def to_dict(self) -> dict:
        return {
            "floor": self.floor,
            "channels": [
                {"name": c, "kind": k, "mean": float(m), "std": float(s)}
                for c, k, m, s in zip(self.channels, self.kinds, self.mean, self.std)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        ch = d["channels"]
        return cls([c["name"] for c in ch], [c["kind"] for c in ch],
                   [c["mean"] for c in ch], [c["std"] for c in ch], d.get("floor", FLOOR))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _log_mask(kinds) -> np.ndarray:
    return np.array([k != "zscore" for k in kinds])


def fit_stats(values: np.ndarray, channels: Sequence[str], is_aq: Sequence[bool],
              aq_kind: str = "log_then_zscore") -> NormStats:
    """Fit per-channel statistics on training data shaped [T, C, H, W]."""
    if aq_kind not in ("log_then_zscore", "log"):
        raise TransformError(f"aq_kind must be log_then_zscore or log, got {aq_kind!r}")
    values = np.asarray(values)
    if values.shape[0] == 0:
        raise TransformError("cannot fit statistics on an empty training split")
    kinds = [aq_kind if a else "zscore" for a in is_aq]
    C = values.shape[1]
    mean = np.zeros(C)
    std = np.ones(C)
    for c in range(C):
        x = values[:, c].astype(np.float64)
        if kinds[c] != "zscore":
            x = scaled_log(x)
        if kinds[c] == "log":
            continue
        m = x.mean()
        s = x.std()
        if not s > 1e-12 * max(1.0, abs(m)):
            raise TransformError(f"channel {channels[c]!r} has zero variance on the training split")
        mean[c], std[c] = m, s
    return NormStats(list(channels), kinds, mean, std)


def _bcast(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def apply(values: np.ndarray, stats: NormStats, axis: int = -3) -> np.ndarray:
    """Raw -> model space.  ``axis`` is the channel axis of ``values``."""
    x = np.array(values, dtype=np.float64)
    axis = axis % x.ndim
    log_mask = _log_mask(stats.kinds)
    if log_mask.any():
        sl = [slice(None)] * x.ndim
        sl[axis] = np.flatnonzero(log_mask)
        x[tuple(sl)] = scaled_log(x[tuple(sl)])
    return (x - _bcast(stats.mean, x.ndim, axis)) / _bcast(stats.std, x.ndim, axis)


def invert(values: np.ndarray, stats: NormStats, axis: int = -3) -> np.ndarray:
    """Model space -> raw physical (working) units."""
    x = np.asarray(values, dtype=np.float64)
    axis = axis % x.ndim
    x = x * _bcast(stats.std, x.ndim, axis) + _bcast(stats.mean, x.ndim, axis)
    log_mask = _log_mask(stats.kinds)
    if log_mask.any():
        sl = [slice(None)] * x.ndim
        sl[axis] = np.flatnonzero(log_mask)
        x[tuple(sl)] = inverse_scaled_log(x[tuple(sl)])
    return x
