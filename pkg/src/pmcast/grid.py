"""Latitude/longitude grids, latitude weights, regridding and regional crops."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Optional

import numpy as np

from pmcast import _kernels

_TOL = 1e-9


class GridError(ValueError):
    """Raised for malformed grids or unsupported grid operations."""


class LatLonGrid:
    """Uniform lat/lon raster described by its cell-centre coordinates.

    Latitudes must be strictly monotone with uniform spacing; longitudes are
    stored in [0, 360) and must be uniformly spaced modulo 360, which allows
    regional crops that wrap across the prime meridian.
    """

    def __init__(self, lats, lons, resolution_deg: float):
        lats = np.asarray(lats, dtype=np.float64).copy()
        lons = np.mod(np.asarray(lons, dtype=np.float64), 360.0)
        res = float(resolution_deg)
        if res <= 0:
            raise GridError(f"resolution must be positive, got {res}")
        if lats.ndim != 1 or lons.ndim != 1 or lats.size == 0 or lons.size == 0:
            raise GridError("lats and lons must be non-empty 1-D sequences")
        if np.any(np.abs(lats) > 90.0):
            raise GridError("latitudes must lie in [-90, 90]")
        if lats.size > 1:
            d = np.diff(lats)
            if not (np.all(np.abs(np.abs(d) - res) <= _TOL) and (np.all(d > 0) or np.all(d < 0))):
                raise GridError("latitudes must be strictly monotone with uniform spacing")
        if lons.size > 1:
            d = np.mod(np.diff(lons), 360.0)
            if not np.all(np.abs(d - res) <= _TOL):
                raise GridError("longitudes must be uniformly spaced (mod 360)")
        if lats.size * res > 180.0 + res + _TOL:
            raise GridError("too many latitude rows for the resolution")
        lats.setflags(write=False)
        lons.setflags(write=False)
        self.lats = lats
        self.lons = lons
        self.resolution_deg = res

    @classmethod
    def global_grid(cls, resolution_deg: float, lon_offset: float = 0.0) -> "LatLonGrid":
        """Pole-free global grid: latitude centres at -90 + res/2 + i*res."""
        res = float(resolution_deg)
        nlat = int(round(180.0 / res))
        nlon = int(round(360.0 / res))
        if abs(nlat * res - 180.0) > _TOL or abs(nlon * res - 360.0) > _TOL:
            raise GridError(f"resolution {res} does not tile the globe")
        lats = -90.0 + res / 2 + res * np.arange(nlat)
        lons = lon_offset + res * np.arange(nlon)
        return cls(lats, lons, res)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.lats.size, self.lons.size)

    @property
    def is_global(self) -> bool:
        res = self.resolution_deg
        return (
            abs(self.lons.size * res - 360.0) <= 1e-6
            and abs(self.lats.size * res - 180.0) <= 1e-6
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LatLonGrid):
            return NotImplemented
        return (
            self.resolution_deg == other.resolution_deg
            and np.array_equal(self.lats, other.lats)
            and np.array_equal(self.lons, other.lons)
        )

    def __hash__(self):
        return hash((self.resolution_deg, self.lats.tobytes(), self.lons.tobytes()))

    def __repr__(self) -> str:
        return (
            f"LatLonGrid({self.shape[0]}x{self.shape[1]}, res={self.resolution_deg}, "
            f"lat=[{self.lats[0]:.4f}..{self.lats[-1]:.4f}], lon=[{self.lons[0]:.4f}..{self.lons[-1]:.4f}])"
        )

    def to_dict(self) -> dict:
        return {
            "resolution_deg": self.resolution_deg,
            "lats": [float(x) for x in self.lats],
            "lons": [float(x) for x in self.lons],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatLonGrid":
        return cls(d["lats"], d["lons"], d["resolution_deg"])


@dataclass(frozen=True)
class VariableField:
    """A named variable on a grid.

    ``data`` has trailing dims [H, W]; leading dims (time, level) are allowed
    so whole stacks can be regridded or cropped in one call.
    """

    name: str
    data: np.ndarray
    grid: LatLonGrid
    units: str = ""
    timestamp: Optional[datetime] = None
    level: Optional[int] = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.data.shape[-2:]) != self.grid.shape:
            raise GridError(
                f"field {self.name!r} shape {self.data.shape} does not match grid {self.grid.shape}"
            )


@dataclass(frozen=True)
class BoundingBox:
    """Lat/lon box in degrees; ``lon_min > lon_max`` wraps across 0 degrees."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise GridError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")

    @property
    def full_longitude(self) -> bool:
        return self.lon_max - self.lon_min >= 360.0

    def lon_offsets(self, lons: np.ndarray) -> np.ndarray:
        """Eastward distance from ``lon_min`` to each longitude, in [0, 360)."""
        return np.mod(np.asarray(lons) - self.lon_min, 360.0)

    def lon_width(self) -> float:
        if self.full_longitude:
            return 360.0
        return float(np.mod(self.lon_max - self.lon_min, 360.0))


# 8 x 14 boxes on the 5.625 degree grid; the MENA box wraps the prime meridian.
REGIONS: dict[str, BoundingBox] = {
    "mena": BoundingBox(7.0, 48.5, 335.0, 52.0),
    "east_asia": BoundingBox(12.0, 55.0, 83.0, 159.0),
    "north_america": BoundingBox(23.0, 66.0, 229.0, 305.0),
    "globe": BoundingBox(-90.0, 90.0, 0.0, 360.0),
}


def parse_region(spec: str) -> BoundingBox:
    """Preset name or ``lat_min,lat_max,lon_min,lon_max``."""
    key = spec.strip().lower().replace("-", "_")
    if key in REGIONS:
        return REGIONS[key]
    parts = spec.split(",")
    if len(parts) != 4:
        raise GridError(f"unknown region {spec!r}; presets: {', '.join(REGIONS)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise GridError(f"cannot parse bounding box {spec!r}") from exc
    return BoundingBox(*vals)


def latitude_weights(grid: LatLonGrid) -> np.ndarray:
    """cos(lat) weights normalised to unit mean over rows."""
    lats = grid.lats
    if np.any(np.abs(lats) >= 90.0):
        raise GridError("latitude weights undefined on grids containing a pole row")
    c = np.cos(np.deg2rad(lats))
    return c / c.mean()


def _lat_edges(grid: LatLonGrid) -> tuple[np.ndarray, np.ndarray]:
    h = grid.resolution_deg / 2
    lo = np.clip(grid.lats - h, -90.0, 90.0)
    hi = np.clip(grid.lats + h, -90.0, 90.0)
    return lo, hi


def lat_overlap_matrix(src: LatLonGrid, dst: LatLonGrid) -> np.ndarray:
    """Area of each (dst row, src row) latitude band overlap, in sin(lat) units."""
    s_lo, s_hi = _lat_edges(src)
    d_lo, d_hi = _lat_edges(dst)
    top = np.minimum(d_hi[:, None], s_hi[None, :])
    bot = np.maximum(d_lo[:, None], s_lo[None, :])
    ov = np.sin(np.deg2rad(top)) - np.sin(np.deg2rad(bot))
    return np.where(top > bot, ov, 0.0)


def lon_overlap_matrix(src: LatLonGrid, dst: LatLonGrid) -> np.ndarray:
    """Overlap length in degrees of each (dst col, src col) pair on the circle."""
    sh = src.resolution_deg / 2
    dh = dst.resolution_deg / 2
    d = np.mod(src.lons[None, :] - dst.lons[:, None] + 180.0, 360.0) - 180.0
    ov = np.minimum(dh, d + sh) - np.maximum(-dh, d - sh)
    return np.maximum(ov, 0.0)


def _require_global(*grids: LatLonGrid) -> None:
    for g in grids:
        if not g.is_global:
            raise GridError(f"regridding requires global uniform grids, got {g!r}")


def regrid_conservative(field: VariableField, dst: LatLonGrid) -> VariableField:
    """First-order conservative (area-weighted) regrid between global grids."""
    _require_global(field.grid, dst)
    if field.grid == dst:
        return replace(field, data=field.data.copy())
    data = np.asarray(field.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise GridError(f"field {field.name!r} contains non-finite values")
    a_lat = lat_overlap_matrix(field.grid, dst)
    a_lon = lon_overlap_matrix(field.grid, dst)
    w_lat = a_lat / a_lat.sum(axis=1, keepdims=True)
    w_lon = a_lon / a_lon.sum(axis=1, keepdims=True)
    # regrid anomalies about a reference value so constant fields survive exactly
    ref = data.reshape(-1)[0] if data.size else 0.0
    out = w_lat @ (data - ref) @ w_lon.T + ref
    return replace(field, data=out, grid=dst)


def regrid_bilinear(field: VariableField, dst: LatLonGrid) -> VariableField:
    """Bilinear interpolation in (lat, lon) with periodic longitude."""
    _require_global(field.grid, dst)
    src = field.grid
    data = np.asarray(field.data, dtype=np.float64)
    lead = data.shape[:-2]
    H, W = src.shape
    stack = data.reshape((-1, H, W))
    dlat = src.lats[1] - src.lats[0] if H > 1 else 1.0
    yi = (dst.lats - src.lats[0]) / dlat
    xi = np.mod(dst.lons - src.lons[0], 360.0) / src.resolution_deg
    Y, X = np.meshgrid(yi, xi, indexing="ij")
    out = _kernels.sample_bilinear(stack, Y.ravel(), X.ravel(), wrap_x=True)
    out = out.reshape(lead + dst.shape)
    return replace(field, data=out, grid=dst)


def crop_indices(grid: LatLonGrid, bbox: BoundingBox) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of cells whose centres lie inside ``bbox``.

    Columns are ordered eastward from ``lon_min``.  Raises when the
    selection is empty or not a contiguous block.
    """
    rows = np.flatnonzero((grid.lats >= bbox.lat_min - _TOL) & (grid.lats <= bbox.lat_max + _TOL))
    if bbox.full_longitude:
        cols = np.arange(grid.lons.size)
    else:
        off = bbox.lon_offsets(grid.lons)
        inside = np.flatnonzero(off <= bbox.lon_width() + _TOL)
        cols = inside[np.argsort(off[inside], kind="stable")]
    if rows.size == 0 or cols.size == 0:
        raise GridError(f"bounding box {bbox} selects no cells of {grid!r}")
    if np.any(np.diff(rows) != 1):
        raise GridError("bounding box row selection is not contiguous")
    W = grid.lons.size
    steps = np.diff(cols)
    ok = steps == 1
    if grid.is_global:
        ok |= steps == -(W - 1)
    if not np.all(ok):
        raise GridError("bounding box column selection is not contiguous")
    return rows, cols


def crop_grid(grid: LatLonGrid, bbox: BoundingBox) -> LatLonGrid:
    rows, cols = crop_indices(grid, bbox)
    return LatLonGrid(grid.lats[rows], grid.lons[cols], grid.resolution_deg)


def crop_array(data: np.ndarray, grid: LatLonGrid, bbox: BoundingBox) -> tuple[np.ndarray, LatLonGrid]:
    """Crop the trailing [H, W] dims of ``data``; returns (array, cropped grid)."""
    rows, cols = crop_indices(grid, bbox)
    out = np.asarray(data)[..., rows[0] : rows[-1] + 1, :][..., cols]
    return out, LatLonGrid(grid.lats[rows], grid.lons[cols], grid.resolution_deg)


def crop_region(field: VariableField, bbox: BoundingBox) -> VariableField:
    data, g = crop_array(field.data, field.grid, bbox)
    return replace(field, data=np.array(data), grid=g)
