"""Forecast evaluation: persistence, checkpoints and external forecasts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from pmcast import transform
from pmcast.align import PM_VARIABLES, Cube, VariableSpec, build_sample_index, to_hours, years_of
from pmcast.grid import REGIONS, BoundingBox, LatLonGrid, latitude_weights
from pmcast.io import Dataset, DatasetWriter, load_cube
from pmcast.loss import lat_weighted_rmse
from pmcast.model import Model

TAIL_QUANTILE = 0.9


class EvalError(ValueError):
    pass


def persistence_forecast(state: np.ndarray, lead_hours=None) -> np.ndarray:
    """The future equals the present, for any lead."""
    return np.array(state, copy=True)


class Persistence:
    name = "persistence"

    def predict(self, cube: Cube, input_idx: np.ndarray, lead: int) -> np.ndarray:
        return persistence_forecast(cube.values[input_idx])


class ModelForecaster:
    """Runs a trained model in normalized space and inverts to working units."""

    name = "model"

    def __init__(self, model: Model, stats: transform.NormStats, channels: Sequence[str], batch: int = 64):
        self.model = model
        self.stats = stats
        self.channels = tuple(channels)
        self.batch = batch

    def predict(self, cube: Cube, input_idx: np.ndarray, lead: int) -> np.ndarray:
        if cube.channel_names != self.channels:
            raise EvalError("cube channels differ from the checkpoint's channel list")
        cfg = self.model.cfg
        if cube.grid.shape != (cfg.img_h, cfg.img_w):
            raise EvalError(f"region shape {cube.grid.shape} does not match model input {(cfg.img_h, cfg.img_w)}")
        st = self.stats.subset(self.channels)
        out = np.empty((input_idx.size,) + cube.values.shape[1:])
        w_idx, a_idx = cube.weather_idx, cube.aq_idx
        for s in range(0, input_idx.size, self.batch):
            sl = slice(s, s + self.batch)
            x = transform.apply(cube.values[input_idx[sl]], st, axis=1)
            f = self.model.predict(x, np.full(x.shape[0], float(lead)))
            z = np.empty_like(x)
            z[:, w_idx] = f.weather
            z[:, a_idx] = f.aq
            out[sl] = transform.invert(z, st, axis=1)
        return out


class ExternalForecaster:
    """Precomputed forecasts keyed by initialisation time, for one lead."""

    name = "external"

    def __init__(self, dataset: Dataset):
        if dataset.attrs.get("kind") != "forecast":
            raise EvalError(f"{dataset.root} is not a forecast dataset")
        self.ds = dataset
        self.lead = int(dataset.attrs["lead_time_hours"])
        self._cache: dict = {}

    def predict(self, cube: Cube, input_idx: np.ndarray, lead: int) -> np.ndarray:
        if lead != self.lead:
            raise EvalError(f"external forecast covers lead {self.lead} h only, requested {lead} h")
        key = cube.grid
        if key not in self._cache:
            bbox = _bbox_of(cube)
            self._cache = {key: load_cube(self.ds, cube.channels, bbox)}
        fc = self._cache[key]
        pos = {int(t): i for i, t in enumerate(fc.times.astype(np.int64))}
        rows = []
        for i in input_idx:
            k = pos.get(int(cube.times[i].astype(np.int64)))
            if k is None:
                raise EvalError(f"external forecast lacks initialisation time {cube.times[i]}")
            rows.append(k)
        return fc.values[np.asarray(rows, dtype=np.int64)].astype(np.float64)


def _bbox_of(cube: Cube) -> Optional[BoundingBox]:
    """A box selecting exactly the cube's cell centres."""
    g = cube.grid
    if g.is_global:
        return None
    q = g.resolution_deg / 4
    return BoundingBox(float(g.lats.min() - q), float(g.lats.max() + q),
                       float(g.lons[0] - q) % 360.0, float(g.lons[-1] + q) % 360.0)


def tail_rmse(pred: np.ndarray, target: np.ndarray, q: float = TAIL_QUANTILE) -> np.ndarray:
    """Per-channel RMSE over pixels whose target is at or above the channel's q-quantile."""
    out = np.empty(pred.shape[1])
    for c in range(pred.shape[1]):
        t = target[:, c]
        m = t >= np.quantile(t, q)
        out[c] = np.sqrt(np.mean((pred[:, c][m] - t[m]) ** 2))
    return out


def error_map(forecast: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Signed prediction minus ground truth."""
    forecast = np.asarray(forecast, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if forecast.shape != truth.shape:
        raise EvalError(f"shape mismatch {forecast.shape} vs {truth.shape}")
    return forecast - truth


@dataclass
class EvalMode:
    name: str
    year_range: Optional[tuple[int, int]] = None
    hours_of_day: Optional[tuple[int, ...]] = None


def evaluate(forecaster, cube: Cube, lead_times: Iterable[int], mode: Optional[EvalMode] = None,
             channels: Optional[Sequence[str]] = None, batch: int = 256) -> dict:
    """Per-lead, per-channel RMSE report (latitude-weighted, unweighted, top decile)."""
    mode = mode or EvalMode("all")
    names = cube.channel_names
    sel = list(range(len(names))) if channels is None else [names.index(c) for c in channels]
    t = to_hours(cube.times)
    span = int((t[-1] - t[0]).astype(np.int64)) if t.size else 0
    w_lat = latitude_weights(cube.grid)
    report = {"forecaster": forecaster.name, "mode": mode.name, "grid_shape": list(cube.grid.shape),
              "leads": {}}
    for lead in lead_times:
        lead = int(lead)
        if lead > span:
            raise EvalError(f"lead time {lead} h exceeds the dataset range ({span} h)")
        idx = build_sample_index(t, [lead], mode.year_range, mode.hours_of_day)
        if len(idx) == 0:
            raise EvalError(f"no evaluation samples at lead {lead} h for mode {mode.name!r}")
        preds, tgts = [], []
        for s in range(0, len(idx), batch):
            inp = idx.input_idx[s : s + batch]
            preds.append(forecaster.predict(cube, inp, lead)[:, sel])
            tgts.append(np.asarray(cube.values[idx.target_idx[s : s + batch]][:, sel], dtype=np.float64))
        pred = np.concatenate(preds).astype(np.float64)
        tgt = np.concatenate(tgts)
        if not np.all(np.isfinite(pred)):
            raise FloatingPointError(f"non-finite forecast values at lead {lead} h")
        r_lat = lat_weighted_rmse(pred, tgt, w_lat)
        r_plain = lat_weighted_rmse(pred, tgt, None)
        r_tail = tail_rmse(pred, tgt)
        report["leads"][str(lead)] = {
            "n_samples": len(idx),
            "channels": {
                names[c]: {"units": cube.units.get(names[c], ""), "rmse_lat": float(r_lat[k]),
                           "rmse": float(r_plain[k]), "rmse_top_decile": float(r_tail[k])}
                for k, c in enumerate(sel)
            },
        }
    return report


def standard_modes(test_years: tuple[int, int]) -> list[EvalMode]:
    """Full test split, plus first-test-year 00:00 inputs for baseline parity."""
    return [EvalMode("test", tuple(test_years)),
            EvalMode("baseline", (test_years[0], test_years[0]), (0,))]


def region_sweep(make_forecaster, cube: Cube, regions: Sequence[str], lead_times: Iterable[int],
                 mode: Optional[EvalMode] = None) -> dict:
    """Evaluate one forecaster on several region crops of a global cube."""
    pm = [n for n in cube.channel_names if n in PM_VARIABLES]
    out = {}
    for r in regions:
        key = r.strip().lower().replace("-", "_")
        if key not in REGIONS:
            raise EvalError(f"unknown region preset {r!r}")
        sub = cube.crop(REGIONS[key])
        out[key] = evaluate(make_forecaster(sub), sub, lead_times, mode, channels=pm or None)
    return out


def report_rows(report: dict) -> list[dict]:
    rows = []
    for lead, entry in report["leads"].items():
        for ch, m in entry["channels"].items():
            rows.append({"mode": report.get("mode", ""), "lead_hours": int(lead), "channel": ch,
                         "units": m["units"], "n_samples": entry["n_samples"], "rmse_lat": m["rmse_lat"],
                         "rmse": m["rmse"], "rmse_top_decile": m["rmse_top_decile"]})
    return rows


CSV_FIELDS = ("region", "mode", "lead_hours", "channel", "units", "n_samples", "rmse_lat", "rmse", "rmse_top_decile")


def write_reports(reports: dict, json_path, csv_path, meta: Optional[dict] = None) -> None:
    """``reports`` maps region -> mode -> report."""
    with open(json_path, "w") as fh:
        json.dump({"meta": meta or {}, "regions": reports}, fh, indent=1, sort_keys=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for region, by_mode in reports.items():
            for rep in by_mode.values():
                for r in report_rows(rep):
                    w.writerow([region] + [repr(r[k]) if isinstance(r[k], float) else r[k] for k in CSV_FIELDS[1:]])


def write_error_map(out, grid: LatLonGrid, var: str, units: str, valid_time, err: np.ndarray, attrs: dict) -> None:
    """Error raster as a one-timestamp dataset plus a lat/lon/value CSV."""
    spec = VariableSpec(var + "_error", var, "air_quality" if units.startswith("ug") else "weather", None, units)
    w = DatasetWriter(out, grid, dict(attrs, kind="error_map", definition="prediction - truth"))
    w.add_variable(spec, 1)
    w.write(var, int(years_of([valid_time])[0]), [valid_time], err[None, None].astype(np.float32))
    w.close()
    with open(Path(out) / f"{var}_error.csv", "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(("lat", "lon", "error"))
        for i, la in enumerate(grid.lats):
            for j, lo in enumerate(grid.lons):
                cw.writerow((repr(float(la)), repr(float(lo)), repr(float(err[i, j]))))
