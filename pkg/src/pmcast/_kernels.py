"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PMCAST_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable as ``<name>_numba`` / ``<name>_numpy`` so tests and the
benchmark can compare them directly; the unsuffixed names are bound to the
selected backend.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("PMCAST_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    # no fastmath: results must be reproducible bit-for-bit
    return numba.njit(cache=True)(fn)


# ---------------------------------------------------------------------------
# bilinear sampling at fractional (row, col) positions
# ---------------------------------------------------------------------------


def _sample_bilinear_py(field, yi, xi, wrap_x):
    C, H, W = field.shape
    P = yi.shape[0]
    out = np.empty((C, P), dtype=np.float64)
    for p in range(P):
        y = yi[p]
        if y < 0.0:
            y = 0.0
        elif y > H - 1:
            y = float(H - 1)
        i0 = int(np.floor(y))
        if i0 >= H - 1:
            i0 = H - 2 if H > 1 else 0
        i1 = i0 + 1 if H > 1 else 0
        fy = y - i0

        x = xi[p]
        if wrap_x:
            x = x % W
            j0 = int(np.floor(x))
            if j0 >= W:
                j0 = W - 1
            j1 = (j0 + 1) % W
        else:
            if x < 0.0:
                x = 0.0
            elif x > W - 1:
                x = float(W - 1)
            j0 = int(np.floor(x))
            if j0 >= W - 1:
                j0 = W - 2 if W > 1 else 0
            j1 = j0 + 1 if W > 1 else 0
        fx = x - j0

        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        for c in range(C):
            out[c, p] = (
                w00 * field[c, i0, j0]
                + w01 * field[c, i0, j1]
                + w10 * field[c, i1, j0]
                + w11 * field[c, i1, j1]
            )
    return out


sample_bilinear_numba = _njit(_sample_bilinear_py)


def sample_bilinear_numpy(field, yi, xi, wrap_x):
    C, H, W = field.shape
    y = np.clip(yi, 0.0, H - 1)
    i0 = np.floor(y).astype(np.int64)
    if H > 1:
        i0 = np.minimum(i0, H - 2)
        i1 = i0 + 1
    else:
        i0 = np.zeros_like(i0)
        i1 = i0
    fy = y - i0

    if wrap_x:
        x = np.mod(xi, W)
        j0 = np.minimum(np.floor(x).astype(np.int64), W - 1)
        j1 = (j0 + 1) % W
    else:
        x = np.clip(xi, 0.0, W - 1)
        j0 = np.floor(x).astype(np.int64)
        if W > 1:
            j0 = np.minimum(j0, W - 2)
            j1 = j0 + 1
        else:
            j0 = np.zeros_like(j0)
            j1 = j0
    fx = x - j0

    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    return (
        w00 * field[:, i0, j0]
        + w01 * field[:, i0, j1]
        + w10 * field[:, i1, j0]
        + w11 * field[:, i1, j1]
    )


def sample_bilinear(field, yi, xi, wrap_x=True):
    """Sample ``field`` [C, H, W] at fractional row/col positions.

    Rows are clamped to the grid; columns wrap periodically when
    ``wrap_x`` is true (longitude) and clamp otherwise.  Returns [C, P].
    """
    field = np.ascontiguousarray(field, dtype=np.float64)
    yi = np.ascontiguousarray(yi, dtype=np.float64).ravel()
    xi = np.ascontiguousarray(xi, dtype=np.float64).ravel()
    if USE_NUMBA:
        return sample_bilinear_numba(field, yi, xi, bool(wrap_x))
    return sample_bilinear_numpy(field, yi, xi, bool(wrap_x))


# ---------------------------------------------------------------------------
# histogram bin lookup (clamped to the edge bins)
# ---------------------------------------------------------------------------


def _bin_lookup_py(values, edges):
    n_bins = edges.shape[0] - 1
    out = np.empty(values.shape[0], dtype=np.int64)
    for k in range(values.shape[0]):
        v = values[k]
        lo = 0
        hi = n_bins
        # largest i with edges[i] <= v, then clamp into [0, n_bins - 1]
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if edges[mid] <= v:
                lo = mid
            else:
                hi = mid
        out[k] = lo
    return out


bin_lookup_numba = _njit(_bin_lookup_py)

# below this size the numpy path is as fast and skips the JIT start-up cost;
# both paths return identical indices
BIN_LOOKUP_NUMBA_MIN = 4096


def bin_lookup_numpy(values, edges):
    n_bins = edges.shape[0] - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, n_bins - 1).astype(np.int64)


def bin_lookup(values, edges):
    """Index of the half-open bin [e_i, e_{i+1}) holding each value.

    The last bin is closed on the right; values outside the edges clamp to
    the first or last bin.
    """
    values = np.asarray(values, dtype=np.float64)
    shape = values.shape
    flat = np.ascontiguousarray(values.ravel())
    edges = np.ascontiguousarray(edges, dtype=np.float64)
    if USE_NUMBA and flat.size >= BIN_LOOKUP_NUMBA_MIN:
        idx = bin_lookup_numba(flat, edges)
    else:
        idx = bin_lookup_numpy(flat, edges)
    return idx.reshape(shape)


# ---------------------------------------------------------------------------
# fused weighted absolute error reduction over [B, C, H, W]
# ---------------------------------------------------------------------------


def _weighted_abs_sums_py(err, row_w, freq_w):
    B, C, H, W = err.shape
    num = np.zeros(C, dtype=np.float64)
    den = np.zeros(C, dtype=np.float64)
    for c in range(C):
        s_num = 0.0
        s_den = 0.0
        for b in range(B):
            for i in range(H):
                rw = row_w[i]
                for j in range(W):
                    w = rw * freq_w[b, c, i, j]
                    s_num += w * abs(err[b, c, i, j])
                    s_den += w
        num[c] = s_num
        den[c] = s_den
    return num, den


weighted_abs_sums_numba = _njit(_weighted_abs_sums_py)


def weighted_abs_sums_numpy(err, row_w, freq_w):
    w = row_w[None, None, :, None] * freq_w
    num = (w * np.abs(err)).sum(axis=(0, 2, 3))
    den = w.sum(axis=(0, 2, 3))
    return num, den


def weighted_abs_sums(err, row_w, freq_w):
    """Per-channel sums of ``row_w * freq_w * |err|`` and of ``row_w * freq_w``."""
    err = np.ascontiguousarray(err, dtype=np.float64)
    row_w = np.ascontiguousarray(row_w, dtype=np.float64)
    freq_w = np.ascontiguousarray(freq_w, dtype=np.float64)
    if USE_NUMBA:
        return weighted_abs_sums_numba(err, row_w, freq_w)
    return weighted_abs_sums_numpy(err, row_w, freq_w)
