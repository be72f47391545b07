"""Deterministic synthetic weather + air-quality dataset generator.

Weather: seeded low-order travelling waves on the sphere with seasonal and
diurnal cycles, hourly.  Air quality: log-concentration fields relaxed toward
a hotspot climatology, advected semi-Lagrangian by the emitted 10 m winds,
stirred by smooth noise and punctuated by dust bursts; 3-hourly, stored in kg.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from pmcast import _kernels
from pmcast.align import (
    PRESSURE_LEVELS,
    VariableCatalog,
    select_preset,
    to_hours,
)
from pmcast.grid import LatLonGrid
from pmcast.io import DatasetWriter

log = logging.getLogger(__name__)

EARTH_RADIUS = 6.371e6
AQ_CADENCE = 3
SPINUP_STEPS = 80  # 10 days of 3-hourly steps
SMOOTH_PASSES = 3  # box-filter passes applied to the per-step tracer noise
JITTER = 0.05  # per-pixel log-space noise on derived AQ channels
EPOCH = np.datetime64("2000-01-01T00", "h")

_VAR_IDS = {name: i for i, name in enumerate(
    ["z", "t", "q", "r", "u", "v", "t2m", "u10", "v10",
     "co", "go3", "no", "no2", "so2", "pm1", "pm10", "pm2p5", "tcco", "tc_no", "tcno2", "gtco3"])}

_HEIGHT_KM = {50: 20.6, 250: 10.4, 500: 5.6, 600: 4.2, 700: 3.0, 850: 1.5, 925: 0.76}
_TEMP_K = {50: 212.0, 250: 224.0, 500: 253.0, 600: 262.0, 700: 272.0, 850: 283.0, 925: 288.0}

# (base, wave scale, seasonal amp, diurnal amp)
_WEATHER = {
    "z": lambda lv: (9.81 * 1000.0 * _HEIGHT_KM[lv], 600.0, 300.0, 0.0),
    "t": lambda lv: (_TEMP_K[lv], 6.0, 8.0, 1.5 if lv >= 850 else 0.3),
    "u": lambda lv: (20.0 if lv == 250 else 6.0, 10.0, 3.0, 0.0),
    "v": lambda lv: (0.0, 6.0, 1.0, 0.0),
    "t2m": lambda lv: (288.0, 7.0, 10.0, 5.0),
    "u10": lambda lv: (2.0, 6.0, 1.0, 1.0),
    "v10": lambda lv: (0.0, 5.0, 1.0, 1.0),
}


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])


@dataclass
class _Waves:
    amp: np.ndarray
    m: np.ndarray
    n: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    lat_shift: np.ndarray


def _waves(seed: int, var: str, level: int, k: int = 4) -> _Waves:
    r = _rng(seed, 1, _VAR_IDS[var], level)
    return _Waves(
        amp=r.uniform(0.4, 1.0, k),
        m=r.integers(1, 4, k).astype(np.float64),
        n=r.integers(1, 4, k).astype(np.float64),
        omega=r.choice([-1.0, 1.0], k) * 2 * np.pi / r.uniform(72.0, 240.0, k),
        phase=r.uniform(0, 2 * np.pi, k),
        lat_shift=r.uniform(0, np.pi, k),
    )


def _wave_sum(w: _Waves, hours: np.ndarray, lat_rad: np.ndarray, lon_rad: np.ndarray) -> np.ndarray:
    """sum_k a_k cos(m_k lon - w_k t + p_k) cos(n_k lat + s_k), shape [T, H, W]."""
    out = np.zeros((hours.size, lat_rad.size, lon_rad.size))
    for a, m, n, om, ph, sh in zip(w.amp, w.m, w.n, w.omega, w.phase, w.lat_shift):
        zonal = np.cos(m * lon_rad[None, :] - om * hours[:, None] + ph)  # [T, W]
        merid = np.cos(n * lat_rad + sh)  # [H]
        out += a * zonal[:, None, :] * merid[None, :, None]
    return out / np.sqrt(len(w.amp))


def _calendar(times: np.ndarray):
    t = to_hours(times)
    hours = (t - EPOCH).astype(np.int64).astype(np.float64)
    year_start = t.astype("datetime64[Y]").astype("datetime64[h]")
    doy = (t - year_start).astype(np.int64) / 24.0
    hod = (t.astype(np.int64) % 24).astype(np.float64)
    return hours, doy, hod


def weather_field(seed: int, var: str, level: Optional[int], times, grid: LatLonGrid) -> np.ndarray:
    """Closed-form weather variable [T, H, W] (float64) at the given hours."""
    lv = int(level) if level is not None else 0
    lat = np.deg2rad(grid.lats)
    lon = np.deg2rad(grid.lons)
    hours, doy, hod = _calendar(times)
    wave = _wave_sum(_waves(seed, var, lv), hours, lat, lon)
    season = np.cos(2 * np.pi * (doy - 200.0) / 365.25)[:, None, None] * np.sin(lat)[None, :, None]
    diurnal = np.cos(2 * np.pi * (hod[:, None] + grid.lons[None, :] / 15.0 - 14.0) / 24.0)[:, None, :] \
        * np.cos(lat)[None, :, None]
    if var == "q":
        base = 0.012 * np.exp(-_HEIGHT_KM[lv] / 2.5)
        return base * np.exp(0.35 * wave + 0.2 * season)
    if var == "r":
        return 55.0 + 35.0 * np.tanh(0.9 * wave + 0.2 * diurnal)
    base, scale, s_amp, d_amp = _WEATHER[var](lv)
    if var == "z":
        # geopotential falls toward the poles
        return base + scale * wave + s_amp * season - 0.02 * base * np.sin(lat)[None, :, None] ** 2
    if var in ("t", "t2m"):
        return base + scale * wave + s_amp * season + d_amp * diurnal - 25.0 * np.sin(lat)[None, :, None] ** 2
    return base + scale * wave + s_amp * season + d_amp * diurnal


# ---------------------------------------------------------------------------
# air quality
# ---------------------------------------------------------------------------

# index of each advected tracer
_TRACERS = ("pm", "co", "go3", "no", "no2", "so2")
_HOTSPOTS = [(26.0, 45.0), (30.0, 31.0), (24.0, 10.0), (35.0, 52.0), (18.0, 355.0),
             (35.0, 115.0), (28.0, 78.0), (40.0, 275.0), (-15.0, 300.0), (5.0, 20.0)]
# (surface base concentration in kg m-3, log-field gain)
_TRACER_BASE = {"pm": (1.2e-8, 1.0), "co": (1.5e-7, 0.5), "go3": (6.0e-8, 0.3),
                "no": (2.0e-9, 0.8), "no2": (1.0e-8, 0.7), "so2": (5.0e-9, 0.8)}


def _climatology(grid: LatLonGrid) -> np.ndarray:
    """Log-space source field per tracer [6, H, W]: hotspots over a dusty belt."""
    lat = grid.lats[:, None]
    lon = grid.lons[None, :]
    out = np.zeros((len(_TRACERS),) + grid.shape)
    belt = np.exp(-((lat - 25.0) / 15.0) ** 2)
    for k, name in enumerate(_TRACERS):
        field = 0.6 * belt if name == "pm" else 0.3 * belt
        for h, (la, lo) in enumerate(_HOTSPOTS):
            if name != "pm" and h % 2 == k % 2:
                continue
            dlon = (lon - lo + 180.0) % 360.0 - 180.0
            d2 = ((lat - la) / 8.0) ** 2 + (dlon * np.cos(np.deg2rad(la)) / 8.0) ** 2
            field = field + 1.2 * np.exp(-0.5 * d2)
        out[k] = field
    return out


def _smooth_noise(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    for _ in range(SMOOTH_PASSES):
        x = (x + np.roll(x, 1, -1) + np.roll(x, -1, -1)) / 3.0
        up = np.concatenate([x[..., :1, :], x[..., :-1, :]], axis=-2)
        dn = np.concatenate([x[..., 1:, :], x[..., -1:, :]], axis=-2)
        x = (x + up + dn) / 3.0
    return x / x.std(axis=(-2, -1), keepdims=True)


class _AqModel:
    relax = 0.04
    noise = 0.12
    burst_prob = 0.02
    burst_mean = 0.8
    burst_cap = 2.5

    def __init__(self, seed: int, grid: LatLonGrid):
        self.seed = seed
        self.grid = grid
        self.clim = _climatology(grid)
        H, W = grid.shape
        dlat = np.deg2rad(grid.resolution_deg)
        coslat = np.cos(np.deg2rad(grid.lats))
        dt = AQ_CADENCE * 3600.0
        self._cell_x = dt / (EARTH_RADIUS * coslat[:, None] * dlat)  # cells per (m/s) eastward
        self._cell_y = dt / (EARTH_RADIUS * dlat) * np.sign(grid.lats[1] - grid.lats[0] if H > 1 else 1.0)
        self._rows = np.broadcast_to(np.arange(H, dtype=np.float64)[:, None], (H, W))
        self._cols = np.broadcast_to(np.arange(W, dtype=np.float64)[None, :], (H, W))
        self.state = self.clim.copy()

    def step(self, step_abs: int, u: np.ndarray, v: np.ndarray) -> None:
        yi = self._rows - v * self._cell_y
        xi = self._cols - u * self._cell_x
        adv = _kernels.sample_bilinear(self.state, yi.ravel(), xi.ravel(), wrap_x=True)
        adv = adv.reshape(self.state.shape)
        rng = _rng(self.seed, 2, step_abs)
        adv += self.relax * (self.clim - adv)
        adv += self.noise * _smooth_noise(rng, adv.shape)
        self._bursts(rng, adv)
        self.state = adv

    def _bursts(self, rng, field) -> None:
        lat = self.grid.lats[:, None]
        lon = self.grid.lons[None, :]
        for la, lo in _HOTSPOTS:
            if rng.random() < self.burst_prob:
                amp = min(rng.exponential(self.burst_mean), self.burst_cap)
                dlon = (lon - lo + 180.0) % 360.0 - 180.0
                d2 = ((lat - la) / 6.0) ** 2 + (dlon * np.cos(np.deg2rad(la)) / 6.0) ** 2
                field[0] += amp * np.exp(-0.5 * d2)


def _level_profile(name: str, level: int) -> tuple[float, float]:
    """(concentration factor, log-field gain) at a pressure level."""
    h = _HEIGHT_KM[level]
    if name == "go3":
        return 1.0 + 40.0 * np.exp(-((h - 22.0) / 6.0) ** 2), 0.5 if h < 8 else 0.15
    return float(np.exp(-h / 3.0)) + 0.02, float(np.exp(-h / 8.0))


def aq_channels_from_state(seed: int, var: str, level: Optional[int], states: np.ndarray,
                           steps_abs: np.ndarray) -> np.ndarray:
    """Concentrations (kg m-3, or kg m-2 for columns) [T, H, W] from tracer states [T, 6, H, W]."""
    pm = states[:, 0]

    def jitter(key: int, scale: float) -> np.ndarray:
        out = np.empty(pm.shape)
        for i, s in enumerate(steps_abs):
            out[i] = _rng(seed, 3, key, int(s)).standard_normal(pm.shape[1:])
        return scale * out

    if var in ("pm2p5", "pm10", "pm1"):
        base, gain = _TRACER_BASE["pm"]
        pm25 = base * np.exp(gain * pm + jitter(_VAR_IDS["pm2p5"], JITTER))
        if var == "pm2p5":
            return pm25
        if var == "pm10":
            # coarse fraction grows with dust loading
            return pm25 * (1.5 + 0.25 * np.clip(pm, 0.0, None)) * np.exp(jitter(_VAR_IDS["pm10"], JITTER))
        return pm25 * 0.68 * np.exp(jitter(_VAR_IDS["pm1"], JITTER))
    column = {"tcco": "co", "tc_no": "no", "tcno2": "no2", "gtco3": "go3"}
    if var in column:
        gas = column[var]
        k = _TRACERS.index(gas)
        base, gain = _TRACER_BASE[gas]
        total = 0.0
        for lv in PRESSURE_LEVELS:
            f, g = _level_profile(gas, lv)
            total = total + f * np.exp(gain * g * states[:, k])
        # kg m-3 summed over a ~8 km scale height -> kg m-2
        return base * 8000.0 / len(PRESSURE_LEVELS) * total * np.exp(jitter(_VAR_IDS[var], JITTER))
    k = _TRACERS.index(var)
    base, gain = _TRACER_BASE[var]
    f, g = _level_profile(var, int(level))
    return base * f * np.exp(gain * g * states[:, k] + jitter(_VAR_IDS[var] * 1000 + int(level), JITTER))


def _windows(years: Sequence[int], days: Optional[int]):
    for y in years:
        start = np.datetime64(f"{y}-01-01T00", "h")
        end = np.datetime64(f"{y + 1}-01-01T00", "h")
        if days is not None:
            end = min(end, start + np.timedelta64(24 * days, "h"))
        yield y, start, end


def _resolve_variables(variables, catalog: VariableCatalog):
    """Map a preset name or list of short names to {var: levels or None}."""
    if variables is None:
        return {s.short_name: (list(s.levels) if s.multi_level else None) for s in catalog}
    if isinstance(variables, str):
        out: dict[str, Optional[list]] = {}
        for ch in select_preset(variables, catalog):
            if ch.level is None:
                out[ch.variable] = None
            else:
                out.setdefault(ch.variable, [])
                out[ch.variable].append(ch.level)
        return out
    return {v: (list(catalog[v].levels) if catalog[v].multi_level else None) for v in variables}


def generate(out, seed: int = 0, years: Iterable[int] = (2003,), resolution_deg: float = 5.625,
             days_per_year: Optional[int] = None, variables=None,
             catalog: Optional[VariableCatalog] = None) -> None:
    """Write a synthetic dataset (weather hourly, AQ 3-hourly) to ``out``.

    ``variables`` is a preset name, a list of short names, or None for the
    whole catalog; presets also restrict which pressure levels are written.
    ``days_per_year`` truncates each year to its first N days.
    """
    catalog = catalog or VariableCatalog()
    grid = LatLonGrid.global_grid(resolution_deg)
    years = [int(y) for y in years]
    if not years:
        raise ValueError("need at least one year")
    selection = _resolve_variables(variables, catalog)
    writer = DatasetWriter(out, grid, {"kind": "synthetic", "seed": int(seed),
                                       "days_per_year": days_per_year, "generator": "pmcast.synth"})
    for var, levels in selection.items():
        spec = catalog[var]
        writer.add_variable(spec, 1 if spec.family == "weather" else AQ_CADENCE, levels)

    aq_vars = [v for v in selection if catalog[v].family == "air_quality"]
    weather_vars = [v for v in selection if catalog[v].family == "weather"]
    model = _AqModel(seed, grid)
    prev_end = None
    for year, start, end in _windows(years, days_per_year):
        hours = start + np.arange((end - start).astype(np.int64)) * np.timedelta64(1, "h")
        log.info("synth year %d: %d hourly steps", year, hours.size)
        # winds first: the emitted float32 values drive the advection
        u10 = weather_field(seed, "u10", None, hours, grid).astype(np.float32)
        v10 = weather_field(seed, "v10", None, hours, grid).astype(np.float32)
        for var in weather_vars:
            levels = selection[var]
            if var == "u10":
                data = u10[:, None]
            elif var == "v10":
                data = v10[:, None]
            elif levels is None:
                data = weather_field(seed, var, None, hours, grid)[:, None]
            else:
                data = np.stack([weather_field(seed, var, lv, hours, grid) for lv in levels], axis=1)
            writer.write(var, year, hours, data.astype(np.float32))

        aq_idx = np.arange(0, hours.size, AQ_CADENCE)
        aq_times = hours[aq_idx]
        steps_abs = ((aq_times - EPOCH).astype(np.int64) // AQ_CADENCE)
        if prev_end is None or prev_end != start:
            model.state = model.clim.copy()
            spin_times = start - np.arange(SPINUP_STEPS, 0, -1) * np.timedelta64(AQ_CADENCE, "h")
            su = weather_field(seed, "u10", None, spin_times, grid).astype(np.float32)
            sv = weather_field(seed, "v10", None, spin_times, grid).astype(np.float32)
            spin_steps = steps_abs[0] - np.arange(SPINUP_STEPS, 0, -1)
            for k in range(SPINUP_STEPS):
                model.step(int(spin_steps[k]), su[k].astype(np.float64), sv[k].astype(np.float64))
        states = np.empty((aq_times.size,) + model.state.shape)
        for k, hi in enumerate(aq_idx):
            model.step(int(steps_abs[k]), u10[hi].astype(np.float64), v10[hi].astype(np.float64))
            states[k] = model.state
        # next window continues only if it starts exactly one AQ step later
        prev_end = aq_times[-1] + np.timedelta64(AQ_CADENCE, "h")
        for var in aq_vars:
            levels = selection[var]
            if levels is None:
                data = aq_channels_from_state(seed, var, None, states, steps_abs)[:, None]
            else:
                data = np.stack([aq_channels_from_state(seed, var, lv, states, steps_abs) for lv in levels], axis=1)
            writer.write(var, year, aq_times, data.astype(np.float32))
    writer.close()
