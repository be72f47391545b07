import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmcast.align import Cube, select_preset
from pmcast.evaluate import (
    EvalError,
    EvalMode,
    Persistence,
    error_map,
    evaluate,
    persistence_forecast,
    region_sweep,
    standard_modes,
    tail_rmse,
    write_reports,
)
from pmcast.grid import LatLonGrid, latitude_weights

GRID = LatLonGrid(np.linspace(7.0, 46.375, 8), 335.0 + 5.625 * np.arange(14), 5.625)


def _cube(values, start="2017-01-01T00", grid=GRID, preset="3PM"):
    t = np.datetime64(start, "h") + np.arange(values.shape[0]) * np.timedelta64(1, "h")
    return Cube(t, select_preset(preset), grid, values)


def _persistence_oracle(v, lead, w):
    """Loops over samples and pixels; no vectorisation."""
    T, C, H, W = v.shape
    out = []
    for c in range(C):
        acc = 0.0
        for s in range(T - lead):
            se = 0.0
            for i in range(H):
                for j in range(W):
                    se += w[i] * (v[s, c, i, j] - v[s + lead, c, i, j]) ** 2
            acc += (se / (H * W)) ** 0.5
        out.append(acc / (T - lead))
    return out


def test_persistence_matches_loop_oracle():
    v = np.random.default_rng(0).lognormal(2.0, 1.0, (30, 3) + GRID.shape)
    rep = evaluate(Persistence(), _cube(v), [6, 12])
    w = latitude_weights(GRID)
    for lead in (6, 12):
        got = [rep["leads"][str(lead)]["channels"][c]["rmse_lat"] for c in ("pm2p5", "pm10", "pm1")]
        np.testing.assert_allclose(got, _persistence_oracle(v, lead, w), rtol=1e-12, atol=1e-12)
        assert rep["leads"][str(lead)]["n_samples"] == 30 - lead


def test_persistence_returns_copy():
    a = np.ones((2, 3))
    b = persistence_forecast(a, 24)
    b += 1
    assert np.all(a == 1)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3), st.sampled_from([1, 6, 24]))
def test_linear_ramp_rmse(slope, lead):
    T = 40
    base = np.random.default_rng(1).normal(size=(1, 3) + GRID.shape)
    v = base + slope * np.arange(T)[:, None, None, None]
    rep = evaluate(Persistence(), _cube(v), [lead])
    for m in rep["leads"][str(lead)]["channels"].values():
        assert m["rmse_lat"] == pytest.approx(abs(slope) * lead, rel=1e-9)
        assert m["rmse"] == pytest.approx(abs(slope) * lead, rel=1e-9)


def test_constant_data_zero_error():
    v = np.full((30, 3) + GRID.shape, 7.5)
    rep = evaluate(Persistence(), _cube(v), [24])
    assert all(m["rmse_lat"] == 0.0 for m in rep["leads"]["24"]["channels"].values())


def test_lead_beyond_range_raises():
    v = np.ones((10, 3) + GRID.shape)
    with pytest.raises(EvalError, match="exceeds"):
        evaluate(Persistence(), _cube(v), [48])


def test_single_latitude_weighted_equals_unweighted():
    g = LatLonGrid([20.0], np.arange(4) * 90.0, 90.0)
    v = np.random.default_rng(2).normal(size=(12, 3, 1, 4))
    rep = evaluate(Persistence(), _cube(v, grid=g), [3])
    for m in rep["leads"]["3"]["channels"].values():
        assert m["rmse_lat"] == pytest.approx(m["rmse"], rel=1e-13)


def test_error_map_constant_offset():
    truth = np.random.default_rng(3).normal(size=GRID.shape)
    np.testing.assert_allclose(error_map(truth + 2.5, truth), 2.5, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_error_map_mean_linear(seed):
    rng = np.random.default_rng(seed)
    f1, f2, t = (rng.normal(size=GRID.shape) for _ in range(3))
    a, b = rng.normal(size=2)
    lhs = error_map(a * f1 + b * f2, (a + b) * t).mean()
    rhs = a * error_map(f1, t).mean() + b * error_map(f2, t).mean()
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_error_map_shape_mismatch():
    with pytest.raises(EvalError):
        error_map(np.zeros((2, 3)), np.zeros((3, 2)))


def test_tail_rmse_oracle():
    rng = np.random.default_rng(4)
    t = rng.lognormal(size=(50, 2, 3, 3))
    p = t + rng.normal(size=t.shape)
    got = tail_rmse(p, t)
    for c in range(2):
        flat_t, flat_p = t[:, c].ravel(), p[:, c].ravel()
        thr = np.sort(flat_t)[int(np.ceil(0.9 * (flat_t.size - 1)))]
        keep = [k for k in range(flat_t.size) if flat_t[k] >= thr]
        assert got[c] == pytest.approx(np.sqrt(np.mean([(flat_p[k] - flat_t[k]) ** 2 for k in keep])), rel=1e-12)


def test_modes_filter_samples():
    v = np.random.default_rng(5).normal(size=(24 * 5, 3) + GRID.shape)
    test, base = standard_modes((2017, 2018))
    assert test.name == "test" and base.hours_of_day == (0,)
    rep = evaluate(Persistence(), _cube(v), [24], mode=base)
    assert rep["leads"]["24"]["n_samples"] == 4
    with pytest.raises(EvalError, match="no evaluation samples"):
        evaluate(Persistence(), _cube(v), [24], mode=EvalMode("none", (2010, 2010)))


def test_region_sweep_shape():
    g = LatLonGrid.global_grid(5.625)
    v = np.random.default_rng(6).normal(size=(30, 3) + g.shape)
    out = region_sweep(lambda c: Persistence(), _cube(v, grid=g), ["mena", "north_america", "east_asia"], [6, 24])
    assert set(out) == {"mena", "north_america", "east_asia"}
    for rep in out.values():
        assert set(rep["leads"]) == {"6", "24"}
        assert set(rep["leads"]["6"]["channels"]) == {"pm2p5", "pm10", "pm1"}
    with pytest.raises(EvalError):
        region_sweep(lambda c: Persistence(), _cube(v, grid=g), ["atlantis"], [6])


def test_reports_written(tmp_path):
    v = np.random.default_rng(7).normal(size=(30, 3) + GRID.shape)
    rep = evaluate(Persistence(), _cube(v), [6])
    write_reports({"mena": {"test": rep}}, tmp_path / "r.json", tmp_path / "r.csv", meta={"seed": 1})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["meta"] == {"seed": 1}
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("region,mode,lead_hours,channel")
    assert len(lines) == 1 + 3
