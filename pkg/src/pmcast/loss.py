"""Latitude-weighted MAE/RMSE and the frequency-weighted training objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from pmcast import _kernels
from pmcast.histo import FrequencyTable


class LossError(ValueError):
    pass


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise LossError(f"expected [C, H, W] or [B, C, H, W], got shape {x.shape}")
    return x


def _check(pred, target, w_lat):
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if np.shape(w_lat) != (pred.shape[-2],):
        raise LossError(f"latitude weights have shape {np.shape(w_lat)}, expected ({pred.shape[-2]},)")


def lat_weighted_mae(pred, target, w_lat) -> float:
    """mean over (batch, channel, row, col) of w_lat[row] * |pred - target|."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check(pred, target, w_lat)
    return float(np.mean(np.asarray(w_lat)[:, None] * np.abs(pred - target)))


def lat_weighted_rmse(pred, target, w_lat=None) -> np.ndarray:
    """Per-channel sqrt(mean_pixels w_lat * err^2), averaged over samples.

    ``w_lat=None`` gives the unweighted RMSE.
    """
    pred = _as_batch(pred)
    target = _as_batch(target)
    if w_lat is None:
        w_lat = np.ones(pred.shape[-2])
    _check(pred, target, w_lat)
    se = np.asarray(w_lat)[:, None] * (pred - target) ** 2
    per_sample = np.sqrt(se.mean(axis=(-2, -1)))
    return per_sample.mean(axis=0)


def freq_weights(raw_target, tables: Sequence[FrequencyTable]) -> np.ndarray:
    """Per-pixel frequency weight from raw-unit targets [B, C, H, W]."""
    raw = _as_batch(raw_target)
    if len(tables) != raw.shape[1]:
        raise LossError(f"{len(tables)} frequency tables for {raw.shape[1]} AQ channels")
    out = np.empty_like(raw)
    for c, t in enumerate(tables):
        if t is None:
            raise LossError(f"missing frequency table for AQ channel {c}")
        out[:, c] = t.weights_for(raw[:, c])
    return out


def resolve_tables(tables: Union[Mapping[str, FrequencyTable], Sequence[FrequencyTable]],
                   aq_channels: Optional[Sequence[str]] = None) -> list[FrequencyTable]:
    if isinstance(tables, Mapping):
        if aq_channels is None:
            raise LossError("aq_channels required when tables are given by name")
        missing = [c for c in aq_channels if c not in tables]
        if missing:
            raise LossError(f"missing frequency table for AQ channel(s) {missing}")
        return [tables[c] for c in aq_channels]
    return list(tables)


@dataclass
class LossBreakdown:
    total: float
    weather_term: float
    chemical_term: float
    per_channel: dict = field(default_factory=dict)
    grad_weather: Optional[np.ndarray] = None
    grad_aq: Optional[np.ndarray] = None


def fmae_loss(pred_w, pred_aq, tgt_w, tgt_aq, w_lat, tables=None, *,
              raw_tgt_aq=None, aq_channels: Optional[Sequence[str]] = None,
              weather_channels: Optional[Sequence[str]] = None,
              mode: str = "fmae", normalize: bool = True,
              weights: Optional[np.ndarray] = None) -> LossBreakdown:
    """Latitude-weighted weather MAE plus frequency-and-latitude weighted AQ MAE.

    Each AQ channel contributes sum(Wf*Wl*|e|) / sum(Wf*Wl) (or the plain mean
    of Wf*Wl*|e| with ``normalize=False``); channel terms are averaged.  The
    frequency weights come from ``raw_tgt_aq`` (defaults to ``tgt_aq``) and can
    be passed precomputed via ``weights``.  ``mode="mae"`` uses unit weights.
    Gradients with respect to both predictions are returned in the breakdown.
    """
    if mode not in ("fmae", "mae"):
        raise LossError(f"unknown loss mode {mode!r}")
    w_lat = np.asarray(w_lat, dtype=np.float64)
    pw, tw = _as_batch(pred_w), _as_batch(tgt_w)
    pa, ta = _as_batch(pred_aq), _as_batch(tgt_aq)
    if pw.shape[1]:
        _check(pw, tw, w_lat)
    if pa.shape[1]:
        _check(pa, ta, w_lat)
    per_channel: dict = {}

    Vw = pw.shape[1]
    grad_w = np.zeros_like(pw)
    weather = 0.0
    if Vw:
        err = pw - tw
        n = err.shape[0] * err.shape[2] * err.shape[3]
        wl = w_lat[None, None, :, None]
        per = (wl * np.abs(err)).sum(axis=(0, 2, 3)) / n / Vw
        weather = float(per.sum())
        grad_w = wl * np.sign(err) / (n * Vw)
        names = weather_channels or [f"weather_{i}" for i in range(Vw)]
        per_channel.update({k: float(v) for k, v in zip(names, per)})

    Va = pa.shape[1]
    grad_a = np.zeros_like(pa)
    chemical = 0.0
    if Va:
        err = pa - ta
        if weights is not None:
            wf = _as_batch(weights)
        elif mode == "mae":
            wf = np.ones_like(err)
        else:
            if tables is None:
                raise LossError("frequency tables required for the fmae loss")
            wf = freq_weights(ta if raw_tgt_aq is None else raw_tgt_aq,
                              resolve_tables(tables, aq_channels))
        num, den = _kernels.weighted_abs_sums(err, w_lat, wf)
        n = err.shape[0] * err.shape[2] * err.shape[3]
        norm = den if normalize else np.full(Va, float(n))
        safe = np.where(norm > 0, norm, 1.0)
        per = np.where(norm > 0, num / safe, 0.0) / Va
        chemical = float(per.sum())
        scale = np.where(norm > 0, 1.0 / (safe * Va), 0.0)
        grad_a = w_lat[None, None, :, None] * wf * np.sign(err) * scale[None, :, None, None]
        names = aq_channels or [f"aq_{i}" for i in range(Va)]
        per_channel.update({k: float(v) for k, v in zip(names, per)})

    return LossBreakdown(weather + chemical, weather, chemical, per_channel, grad_w, grad_a)
