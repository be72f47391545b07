"""On-disk formats: raw-binary datasets with a JSON sidecar, and checkpoints.

Dataset layout::

    <root>/meta.json
    <root>/<variable>/<year>.bin     little-endian float32, [time, level, lat, lon]

``meta.json`` records the grid, the variable specs (with cadence and
levels), and per-cadence, per-year UTC ISO-8601 timestamps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from pmcast.align import (
    HOUR,
    PRESSURE_LEVELS,
    AlignError,
    Channel,
    Cube,
    VariableCatalog,
    VariableSpec,
    contiguous_segments,
    interpolate_segments,
    to_hours,
    working_units,
    years_of,
)
from pmcast.grid import (
    BoundingBox,
    LatLonGrid,
    VariableField,
    crop_indices,
    regrid_bilinear,
    regrid_conservative,
)
from pmcast.model import ParamStore

DATASET_FORMAT = "pmcast-dataset"
DATASET_VERSION = 1
CKPT_MAGIC = b"PMCKPT\x00\x00"
CKPT_VERSION = 1
F32 = np.dtype("<f4")


class DataError(IOError):
    """Missing or malformed files."""


def format_times(times) -> list[str]:
    return [str(t) + ":00:00Z" for t in to_hours(times)]


def parse_times(items: Iterable[str]) -> np.ndarray:
    return np.array([s.rstrip("Z") for s in items], dtype="datetime64[s]").astype("datetime64[h]")


class DatasetWriter:
    """Accumulates per-variable, per-year arrays and writes ``meta.json`` on close."""

    def __init__(self, root, grid: LatLonGrid, attrs: Optional[dict] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.grid = grid
        self.attrs = dict(attrs or {})
        self.variables: dict[str, dict] = {}
        self.timestamps: dict[str, dict[str, list[str]]] = {}

    def add_variable(self, spec: VariableSpec, cadence_hours: int, levels: Optional[Sequence[int]] = None) -> None:
        d = spec.to_dict()
        d["cadence_hours"] = int(cadence_hours)
        d["levels"] = [int(x) for x in levels] if levels is not None else d["levels"]
        self.variables[spec.short_name] = d
        (self.root / spec.short_name).mkdir(exist_ok=True)

    def write(self, var: str, year: int, times, data: np.ndarray) -> None:
        if var not in self.variables:
            raise DataError(f"variable {var!r} not registered")
        spec = self.variables[var]
        nlev = len(spec["levels"]) if spec["levels"] else 1
        arr = np.asarray(data)
        if arr.ndim == 3:
            arr = arr[:, None]
        t = to_hours(times)
        if arr.shape != (t.size, nlev) + self.grid.shape:
            raise DataError(f"{var}/{year}: array shape {arr.shape} != {(t.size, nlev) + self.grid.shape}")
        cad = str(spec["cadence_hours"])
        stamps = format_times(t)
        prev = self.timestamps.setdefault(cad, {}).get(str(year))
        if prev is not None and prev != stamps:
            raise DataError(f"{var}/{year}: timestamps differ from other variables with cadence {cad} h")
        self.timestamps[cad][str(year)] = stamps
        arr.astype(F32, copy=False).tofile(self.root / var / f"{year}.bin")

    def close(self) -> None:
        meta = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "grid": self.grid.to_dict(),
            "variables": list(self.variables.values()),
            "timestamps": self.timestamps,
            "attrs": self.attrs,
        }
        (self.root / "meta.json").write_text(json.dumps(meta, indent=1))


def _spec_from_meta(v: dict) -> VariableSpec:
    # a dataset may hold a subset of a multi-level variable's levels
    d = dict(v)
    if d.get("levels"):
        d["levels"] = list(PRESSURE_LEVELS)
    return VariableSpec.from_dict(d)


class Dataset:
    """Read-only view over a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.is_file():
            raise DataError(f"no meta.json in {self.root}")
        try:
            self.meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed {meta_path}: {exc}") from exc
        if self.meta.get("format") != DATASET_FORMAT:
            raise DataError(f"{meta_path} is not a {DATASET_FORMAT} sidecar")
        self.grid = LatLonGrid.from_dict(self.meta["grid"])
        self.specs = {v["short_name"]: _spec_from_meta(v) for v in self.meta["variables"]}
        self.var_meta = {v["short_name"]: v for v in self.meta["variables"]}
        self.attrs = self.meta.get("attrs", {})

    @property
    def variables(self) -> list[str]:
        return list(self.specs)

    def cadence(self, var: str) -> int:
        return int(self._var(var)["cadence_hours"])

    def levels(self, var: str) -> Optional[list[int]]:
        return self._var(var)["levels"]

    def years(self, var: str) -> list[int]:
        return sorted(int(y) for y in self.meta["timestamps"][str(self.cadence(var))])

    def times(self, var: str, year: Optional[int] = None) -> np.ndarray:
        table = self.meta["timestamps"][str(self.cadence(var))]
        if year is not None:
            return parse_times(table[str(year)])
        return np.concatenate([parse_times(table[str(y)]) for y in self.years(var)])

    def _var(self, var: str) -> dict:
        if var not in self.var_meta:
            raise DataError(f"variable {var!r} not in dataset {self.root}")
        return self.var_meta[var]

    def memmap(self, var: str, year: int) -> np.ndarray:
        t = self.times(var, year)
        lv = self.levels(var)
        shape = (t.size, len(lv) if lv else 1) + self.grid.shape
        path = self.root / var / f"{year}.bin"
        if not path.is_file():
            raise DataError(f"missing data file {path}")
        expect = int(np.prod(shape)) * F32.itemsize
        if path.stat().st_size != expect:
            raise DataError(f"{path} has {path.stat().st_size} bytes, expected {expect}")
        return np.memmap(path, dtype=F32, mode="r", shape=shape)

    def read(self, var: str, years: Optional[Iterable[int]] = None, levels: Optional[Sequence[int]] = None,
             bbox: Optional[BoundingBox] = None) -> tuple[np.ndarray, np.ndarray, LatLonGrid]:
        """(times, data [T, L, H, W] float32, grid) for the requested slice."""
        years = self.years(var) if years is None else [y for y in years if y in self.years(var)]
        avail = self.levels(var)
        if levels is not None:
            if not avail:
                raise AlignError(f"{var} is single-level; cannot select levels {list(levels)}")
            missing = [lv for lv in levels if lv not in avail]
            if missing:
                raise AlignError(f"pressure level(s) {missing} hPa not available for {var} (have {avail})")
            lidx = [avail.index(lv) for lv in levels]
        else:
            lidx = None
        grid = self.grid
        if bbox is not None:
            rows, cols = crop_indices(self.grid, bbox)
            grid = LatLonGrid(self.grid.lats[rows], self.grid.lons[cols], self.grid.resolution_deg)
        ts, parts = [], []
        for y in years:
            mm = self.memmap(var, y)
            a = mm if lidx is None else mm[:, lidx]
            if bbox is not None:
                a = a[:, :, rows[0] : rows[-1] + 1][..., cols]
            parts.append(np.array(a))
            ts.append(self.times(var, y))
        if not parts:
            return np.array([], dtype="datetime64[h]"), np.zeros((0, len(levels or avail or [0])) + grid.shape, F32), grid
        return np.concatenate(ts), np.concatenate(parts), grid


def load_cube(ds: Dataset, channels: Sequence[Channel], bbox: Optional[BoundingBox] = None,
              years: Optional[Iterable[int]] = None) -> Cube:
    """Assemble an hourly channel cube in working units from an aligned dataset."""
    years = None if years is None else list(years)
    by_var: dict[str, list[Channel]] = {}
    for ch in channels:
        by_var.setdefault(ch.variable, []).append(ch)
    planes: dict[str, np.ndarray] = {}
    times = None
    grid = None
    units = {}
    for var, chs in by_var.items():
        if var not in ds.specs:
            raise DataError(f"dataset {ds.root} lacks variable {var!r}")
        if ds.cadence(var) != 1:
            raise AlignError(f"variable {var!r} has {ds.cadence(var)} h cadence; run `align` first")
        levels = [c.level for c in chs] if chs[0].level is not None else None
        t, data, grid = ds.read(var, years, levels, bbox)
        if times is None:
            times = t
        elif not np.array_equal(times, t):
            raise AlignError(f"variable {var!r} timestamps differ from other channels; run `align` first")
        scale, unit = working_units(ds.specs[var])
        for k, ch in enumerate(chs):
            plane = data[:, k]
            planes[ch.name] = plane * np.float32(scale) if scale != 1.0 else plane
            units[ch.name] = unit
    values = np.stack([planes[c.name] for c in channels], axis=1)
    return Cube(times, list(channels), grid, values, units)


def _hourly_year(ds: Dataset, var: str, year: int, regrid) -> tuple[np.ndarray, np.ndarray]:
    """Regrid one variable-year, then interpolate to hourly.

    The first sample of the following year is borrowed so the hours after the
    last stamp of December 31 are interpolated rather than dropped.
    """
    k = ds.cadence(var)
    t = ds.times(var, year)
    data = regrid(np.asarray(ds.memmap(var, year), dtype=np.float64))
    if k == 1:
        return t, data
    if year + 1 in ds.years(var):
        nt = ds.times(var, year + 1)
        if nt.size and (nt[0] - t[-1]).astype(np.int64) == k:
            t = np.concatenate([t, nt[:1]])
            data = np.concatenate([data, regrid(np.asarray(ds.memmap(var, year + 1)[:1], dtype=np.float64))])
    ht, hv = interpolate_segments(t, data, k)
    keep = years_of(ht) == year
    return ht[keep], hv[keep]


def align_dataset(src: Dataset, out, resolution_deg: Optional[float] = None, method: str = "conservative",
                  hourly: bool = True, catalog: Optional[VariableCatalog] = None) -> dict:
    """Catalog-check, regrid and interpolate every variable onto one hourly grid.

    Output timestamps per year are those present for every variable.  With
    ``hourly=False`` variables are only regridded and keep their cadence.
    Returns a small report (timestamps kept per year, variables written).
    """
    catalog = catalog or VariableCatalog()
    for var, spec in src.specs.items():
        if var not in catalog:
            raise AlignError(f"variable {var!r} is not in the catalog")
        ref = catalog[var]
        if ref.units != spec.units or ref.family != spec.family:
            raise AlignError(f"{var}: dataset has {spec.family}/{spec.units}, catalog expects {ref.family}/{ref.units}")
        extra = set(src.levels(var) or []) - set(ref.levels or [])
        if extra:
            raise AlignError(f"{var}: levels {sorted(extra)} are not catalog pressure levels")
    dst = src.grid if resolution_deg is None else LatLonGrid.global_grid(resolution_deg)
    if method not in ("conservative", "bilinear"):
        raise AlignError(f"unknown regrid method {method!r}")
    fn = regrid_conservative if method == "conservative" else regrid_bilinear

    def regrid(a: np.ndarray) -> np.ndarray:
        if src.grid == dst:
            return a
        return fn(VariableField("x", a, src.grid), dst).data

    years = sorted(set.intersection(*[set(src.years(v)) for v in src.variables]))
    if not years:
        raise AlignError("variables share no common year")
    w = DatasetWriter(out, dst, dict(src.attrs, aligned=hourly, regrid=method))
    for var in src.variables:
        w.add_variable(src.specs[var], 1 if hourly else src.cadence(var), src.levels(var))
    report = {"years": {}, "variables": list(src.variables), "grid": dst.to_dict()}
    if not hourly:
        for y in years:
            for var in src.variables:
                w.write(var, y, src.times(var, y), regrid(np.asarray(src.memmap(var, y), np.float64)).astype(F32))
            report["years"][str(y)] = None
        w.close()
        return report
    for y in years:
        common = None
        for var in src.variables:
            t = _hourly_year_times(src, var, y)
            common = t if common is None else np.intersect1d(common, t)
        if common.size == 0:
            raise AlignError(f"no common hourly timestamps in {y}")
        for var in src.variables:
            t, v = _hourly_year(src, var, y, regrid)
            keep = np.isin(t, common)
            w.write(var, y, t[keep], v[keep].astype(F32))
        report["years"][str(y)] = int(common.size)
    w.close()
    return report


def _hourly_year_times(ds: Dataset, var: str, year: int) -> np.ndarray:
    k = ds.cadence(var)
    t = ds.times(var, year)
    if k == 1:
        return t
    if year + 1 in ds.years(var):
        nt = ds.times(var, year + 1)
        if nt.size and (nt[0] - t[-1]).astype(np.int64) == k:
            t = np.concatenate([t, nt[:1]])
    out = []
    for seg in contiguous_segments(t, k):
        if seg.stop - seg.start >= 2:
            out.append(t[seg.start] + np.arange((seg.stop - seg.start - 1) * k + 1) * HOUR)
    if not out:
        return np.array([], dtype="datetime64[h]")
    ht = np.concatenate(out)
    return ht[years_of(ht) == year]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ParamStore, header: dict) -> None:
    """Magic, version, header length, JSON header, then float32 LE tensors."""
    tensors, offset = [], 0
    blobs = []
    for name in params.names():
        arr = np.ascontiguousarray(params[name], dtype=F32)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header)
    head["tensors"] = tensors
    head["dtype"] = "<f4"
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, ParamStore]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint {p} not found")
    raw = p.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{p} is not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    params = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(raw[start : start + t["nbytes"]], dtype=F32).reshape(t["shape"])
        params[t["name"]] = arr.astype(np.float64)
    return header, ParamStore(params)


def write_forecast_dataset(root, grid: LatLonGrid, specs: dict[str, VariableSpec], channels: Sequence[Channel],
                           init_times, values: np.ndarray, lead_time_hours: int) -> None:
    """Write forecasts [T, C, H, W] (in storage units) keyed by initialisation time.

    This is the external-forecast interchange format accepted by ``eval``.
    """
    w = DatasetWriter(root, grid, {"kind": "forecast", "lead_time_hours": int(lead_time_hours)})
    t = to_hours(init_times)
    by_var: dict[str, list[int]] = {}
    for i, ch in enumerate(channels):
        by_var.setdefault(ch.variable, []).append(i)
    yrs = years_of(t)
    for var, idx in by_var.items():
        spec = specs[var]
        levels = [channels[i].level for i in idx] if channels[idx[0]].level is not None else None
        w.add_variable(spec, 1, levels)
        scale, _ = working_units(spec)
        for y in np.unique(yrs):
            m = yrs == y
            w.write(var, int(y), t[m], values[m][:, idx] / scale)
    w.close()
