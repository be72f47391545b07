"""Variable catalog, channel presets, temporal alignment and sample assembly."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from pmcast.grid import BoundingBox, LatLonGrid, crop_array

PRESSURE_LEVELS: tuple[int, ...] = (50, 250, 500, 600, 700, 850, 925)
SURFACE_LEVEL = 925
UPPER_LEVEL = 50
PM_VARIABLES = ("pm2p5", "pm10", "pm1")


class AlignError(ValueError):
    """Raised for cadence, level, preset or split problems."""


@dataclass(frozen=True)
class VariableSpec:
    long_name: str
    short_name: str
    family: str  # "weather" | "air_quality"
    levels: Optional[tuple[int, ...]]  # None means single level
    units: str

    def __post_init__(self):
        if self.family not in ("weather", "air_quality"):
            raise AlignError(f"bad family {self.family!r}")
        if self.levels is not None and len(self.levels) != 7:
            raise AlignError(f"{self.short_name}: multi-level variables carry exactly 7 levels")

    @property
    def multi_level(self) -> bool:
        return self.levels is not None

    def channel_names(self, levels: Optional[Iterable[int]] = None) -> list[str]:
        if not self.multi_level:
            return [self.short_name]
        lv = self.levels if levels is None else levels
        return [f"{self.short_name}_{int(p)}" for p in lv]

    def to_dict(self) -> dict:
        return {
            "long_name": self.long_name,
            "short_name": self.short_name,
            "family": self.family,
            "levels": list(self.levels) if self.levels else None,
            "units": self.units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableSpec":
        lv = d.get("levels")
        return cls(d["long_name"], d["short_name"], d["family"], tuple(lv) if lv else None, d["units"])


def _w(long, short, levels, units):
    return VariableSpec(long, short, "weather", PRESSURE_LEVELS if levels else None, units)


def _a(long, short, levels, units):
    return VariableSpec(long, short, "air_quality", PRESSURE_LEVELS if levels else None, units)


# Storage units.  Mass concentrations are stored in kg and converted to
# micrograms on load (see ``working_units``).
DEFAULT_CATALOG: tuple[VariableSpec, ...] = (
    _w("geopotential", "z", True, "m2 s-2"),
    _w("temperature", "t", True, "K"),
    _w("specific_humidity", "q", True, "kg kg-1"),
    _w("relative_humidity", "r", True, "%"),
    _w("u_component_of_wind", "u", True, "m s-1"),
    _w("v_component_of_wind", "v", True, "m s-1"),
    _w("2m_temperature", "t2m", False, "K"),
    _w("10m_u_component_of_wind", "u10", False, "m s-1"),
    _w("10m_v_component_of_wind", "v10", False, "m s-1"),
    _a("carbon_monoxide", "co", True, "kg m-3"),
    _a("ozone", "go3", True, "kg m-3"),
    _a("nitrogen_monoxide", "no", True, "kg m-3"),
    _a("nitrogen_dioxide", "no2", True, "kg m-3"),
    _a("sulphur_dioxide", "so2", True, "kg m-3"),
    _a("particulate_matter_1um", "pm1", False, "kg m-3"),
    _a("particulate_matter_10um", "pm10", False, "kg m-3"),
    _a("particulate_matter_2.5um", "pm2p5", False, "kg m-3"),
    _a("total_column_carbon_monoxide", "tcco", False, "kg m-2"),
    _a("total_column_nitrogen_monoxide", "tc_no", False, "kg m-2"),
    _a("total_column_nitrogen_dioxide", "tcno2", False, "kg m-2"),
    _a("total_column_ozone", "gtco3", False, "kg m-2"),
)


class VariableCatalog:
    """Ordered, name-unique collection of variable specs."""

    def __init__(self, specs: Sequence[VariableSpec] = DEFAULT_CATALOG):
        names = [s.short_name for s in specs]
        if len(set(names)) != len(names):
            raise AlignError("variable short names must be unique")
        self.specs = tuple(specs)
        self._by_name = {s.short_name: s for s in specs}

    def __getitem__(self, short_name: str) -> VariableSpec:
        try:
            return self._by_name[short_name]
        except KeyError:
            raise AlignError(f"unknown variable {short_name!r}") from None

    def __contains__(self, short_name: str) -> bool:
        return short_name in self._by_name

    def __iter__(self):
        return iter(self.specs)

    def __len__(self):
        return len(self.specs)

    def family(self, family: str) -> list[VariableSpec]:
        return [s for s in self.specs if s.family == family]

    def channels(self, family: Optional[str] = None) -> list["Channel"]:
        out = []
        for s in self.specs:
            if family is None or s.family == family:
                out.extend(channels_for(s))
        return out

    @classmethod
    def from_json(cls, items: list[dict]) -> "VariableCatalog":
        return cls([VariableSpec.from_dict(d) for d in items])


def working_units(spec: VariableSpec) -> tuple[float, str]:
    """Scale factor and unit label applied to stored values on load.

    Air-quality masses stored in kg are handled in micrograms so that the
    1e-4 floor of the scaled log transform sits below realistic values.
    """
    if spec.family == "air_quality" and spec.units.startswith("kg"):
        return 1e9, "ug" + spec.units[2:]
    return 1.0, spec.units


@dataclass(frozen=True)
class Channel:
    """One input/output plane: a variable at one level (or single level)."""

    variable: str
    level: Optional[int]
    family: str

    @property
    def name(self) -> str:
        return self.variable if self.level is None else f"{self.variable}_{self.level}"

    @property
    def is_aq(self) -> bool:
        return self.family == "air_quality"


def channels_for(spec: VariableSpec, levels: Optional[Iterable[int]] = None) -> list[Channel]:
    if not spec.multi_level:
        return [Channel(spec.short_name, None, spec.family)]
    lv = spec.levels if levels is None else levels
    return [Channel(spec.short_name, int(p), spec.family) for p in lv]


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS = (
    "3PM",
    "Weather+3PM",
    "AQ",
    "Weather+AQ",
    "SurfaceWeather+SurfaceAQ",
    "¬SurfaceWeather+¬SurfaceAQ",
    "SurfaceWeather+AQ",
    "Weather+SurfaceAQ",
)


def _canonical_preset(name: str) -> str:
    key = name.strip()
    for alias in ("Not", "not", "~", "!"):
        key = key.replace(alias + "Surface", "¬Surface")
    for p in PRESETS:
        if p.lower() == key.lower():
            return p
    raise AlignError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")


def _family_channels(catalog: VariableCatalog, family: str, mode: str) -> list[Channel]:
    out: list[Channel] = []
    for spec in catalog.family(family):
        if not spec.multi_level or mode == "all":
            out.extend(channels_for(spec))
        else:
            level = SURFACE_LEVEL if mode == "surface" else UPPER_LEVEL
            out.extend(channels_for(spec, [level]))
    return out


def select_preset(name: str, catalog: Optional[VariableCatalog] = None) -> list[Channel]:
    """Ordered channel list for a named variable preset (weather first)."""
    catalog = catalog or VariableCatalog()
    preset = _canonical_preset(name)
    out: list[Channel] = []
    for part in preset.split("+"):
        if part == "3PM":
            out.extend(Channel(v, None, "air_quality") for v in PM_VARIABLES)
            continue
        mode = "all"
        if part.startswith("¬Surface"):
            mode, part = "upper", part[len("¬Surface"):]
        elif part.startswith("Surface"):
            mode, part = "surface", part[len("Surface"):]
        family = {"Weather": "weather", "AQ": "air_quality"}[part]
        out.extend(_family_channels(catalog, family, mode))
    return out


def select_levels(data: np.ndarray, available: Sequence[int], requested: Sequence[int]) -> np.ndarray:
    """Restrict a [T, L, H, W] stack to ``requested`` levels (request order kept)."""
    available = [int(a) for a in available]
    idx = []
    for lv in requested:
        if int(lv) not in available:
            raise AlignError(f"pressure level {lv} hPa not available (have {available})")
        idx.append(available.index(int(lv)))
    return np.asarray(data)[:, idx]


# ---------------------------------------------------------------------------
# time handling
# ---------------------------------------------------------------------------

HOUR = np.timedelta64(1, "h")


def to_hours(times) -> np.ndarray:
    return np.asarray(times, dtype="datetime64[h]")


def years_of(times) -> np.ndarray:
    return to_hours(times).astype("datetime64[Y]").astype(np.int64) + 1970


def interpolate_hourly(times, values, cadence_hours: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Linear per-cell interpolation of a uniform-cadence series to hourly.

    Original timestamps are reproduced exactly and nothing is extrapolated
    past the endpoints.
    """
    t = to_hours(times)
    v = np.asarray(values)
    if t.size < 2:
        raise AlignError("need at least 2 timestamps to interpolate")
    if v.shape[0] != t.size:
        raise AlignError("values and timestamps differ in length")
    gaps = np.diff(t).astype(np.int64)
    if np.any(gaps != cadence_hours):
        raise AlignError(f"irregular cadence: expected uniform {cadence_hours} h gaps, got {sorted(set(gaps.tolist()))}")
    k = cadence_hours
    n = (t.size - 1) * k + 1
    out = np.empty((n,) + v.shape[1:], dtype=np.result_type(v.dtype, np.float64))
    left = v[:-1].astype(out.dtype)
    delta = v[1:].astype(out.dtype) - left
    for s in range(1, k):
        out[s:-1:k] = left + (s / k) * delta
    # originals are copied, not recomputed, so they survive bit for bit
    out[::k] = v
    hourly = t[0] + np.arange(n) * HOUR
    return hourly, out


def contiguous_segments(times, cadence_hours: int) -> list[slice]:
    """Split a sorted timestamp array into runs with uniform cadence."""
    t = to_hours(times)
    if t.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(t).astype(np.int64) != cadence_hours) + 1
    bounds = [0, *breaks.tolist(), t.size]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def interpolate_segments(times, values, cadence_hours: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """``interpolate_hourly`` applied to each contiguous run separately."""
    t = to_hours(times)
    v = np.asarray(values)
    out_t, out_v = [], []
    for seg in contiguous_segments(t, cadence_hours):
        if seg.stop - seg.start < 2:
            continue
        ht, hv = interpolate_hourly(t[seg], v[seg], cadence_hours)
        out_t.append(ht)
        out_v.append(hv)
    if not out_t:
        raise AlignError("no segment with at least 2 timestamps")
    return np.concatenate(out_t), np.concatenate(out_v)


# ---------------------------------------------------------------------------
# splits and samples
# ---------------------------------------------------------------------------

DEFAULT_SPLITS: dict[str, tuple[int, int]] = {
    "train": (2003, 2015),
    "val": (2016, 2016),
    "test": (2017, 2018),
}


@dataclass
class SplitReport:
    indices: dict[str, np.ndarray]
    empty: list[str] = field(default_factory=list)

    def __getitem__(self, key):
        return self.indices[key]


def split_of(timestamp, splits: dict[str, tuple[int, int]] = DEFAULT_SPLITS) -> Optional[str]:
    y = int(years_of([timestamp])[0])
    for name, (a, b) in splits.items():
        if a <= y <= b:
            return name
    return None


def split_by_years(times, splits: dict[str, tuple[int, int]] = DEFAULT_SPLITS) -> SplitReport:
    """Indices of timestamps per split (inclusive year ranges)."""
    yrs = years_of(times)
    idx = {name: np.flatnonzero((yrs >= a) & (yrs <= b)) for name, (a, b) in splits.items()}
    empty = [k for k, v in idx.items() if v.size == 0]
    if empty:
        warnings.warn(f"empty splits: {', '.join(empty)}", stacklevel=2)
    return SplitReport(idx, empty)


@dataclass
class SampleIndex:
    """Parallel arrays describing (input index, target index, lead) triples."""

    input_idx: np.ndarray
    target_idx: np.ndarray
    lead_hours: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return int(self.input_idx.size)


def build_sample_index(
    times,
    lead_times: Sequence[int],
    year_range: Optional[tuple[int, int]] = None,
    hours_of_day: Optional[Sequence[int]] = None,
) -> SampleIndex:
    """Enumerate samples ordered by (timestamp, lead).

    A sample needs its target timestamp present in ``times`` and, when
    ``year_range`` is given, both endpoints inside that range.
    """
    t = to_hours(times)
    leads = sorted(int(x) for x in lead_times)
    if any(x <= 0 for x in leads):
        raise AlignError("lead times must be positive hours")
    pos = {int(v): i for i, v in enumerate(t.astype(np.int64))}
    yrs = years_of(t)
    hod = t.astype(np.int64) % 24
    inp, tgt, lead = [], [], []
    skipped = 0
    for i, ti in enumerate(t.astype(np.int64)):
        if year_range is not None and not (year_range[0] <= yrs[i] <= year_range[1]):
            continue
        if hours_of_day is not None and hod[i] not in hours_of_day:
            continue
        for L in leads:
            j = pos.get(int(ti) + L)
            if j is None or (year_range is not None and not (year_range[0] <= yrs[j] <= year_range[1])):
                skipped += 1
                continue
            inp.append(i)
            tgt.append(j)
            lead.append(L)
    return SampleIndex(
        np.asarray(inp, dtype=np.int64),
        np.asarray(tgt, dtype=np.int64),
        np.asarray(lead, dtype=np.int64),
        skipped,
    )


@dataclass(frozen=True)
class AlignedSample:
    input: np.ndarray
    target: np.ndarray
    lead_time_hours: int
    timestamp: np.datetime64
    channel_index: tuple[str, ...]


@dataclass
class Cube:
    """Aligned hourly data for a channel list: values [T, C, H, W]."""

    times: np.ndarray
    channels: list[Channel]
    grid: LatLonGrid
    values: np.ndarray
    units: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.times = to_hours(self.times)
        if self.values.shape[0] != self.times.size or self.values.shape[1] != len(self.channels):
            raise AlignError(f"cube values {self.values.shape} inconsistent with times/channels")
        if tuple(self.values.shape[2:]) != self.grid.shape:
            raise AlignError("cube spatial shape does not match grid")

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    @property
    def weather_idx(self) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.channels) if not c.is_aq], dtype=np.int64)

    @property
    def aq_idx(self) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.channels) if c.is_aq], dtype=np.int64)

    def crop(self, bbox: BoundingBox) -> "Cube":
        vals, g = crop_array(self.values, self.grid, bbox)
        return Cube(self.times, list(self.channels), g, np.ascontiguousarray(vals), dict(self.units))

    def select_times(self, idx) -> "Cube":
        return Cube(self.times[idx], list(self.channels), self.grid, self.values[idx], dict(self.units))


def build_samples(
    cube: Cube,
    lead_times: Sequence[int],
    bbox: Optional[BoundingBox] = None,
    year_range: Optional[tuple[int, int]] = None,
) -> Iterator[AlignedSample]:
    """Yield one AlignedSample per valid (timestamp, lead), deterministically ordered."""
    if bbox is not None:
        cube = cube.crop(bbox)
    index = build_sample_index(cube.times, lead_times, year_range)
    names = cube.channel_names
    for i, j, L in zip(index.input_idx, index.target_idx, index.lead_hours):
        yield AlignedSample(cube.values[i], cube.values[j], int(L), cube.times[i], names)
