import csv
import json
import re

import numpy as np
import pytest

from pmcast.align import VariableCatalog
from pmcast.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, seed_summary
from pmcast.grid import LatLonGrid
from pmcast.io import DatasetWriter, load_checkpoint

TINY = """\
embed_dim = 8
depth = 1
num_heads = 2
lead_dim = 4
batch_size = 16
max_epochs = 1
train_years = 2015-2015
val_years = 2016-2016
test_years = 2017-2017
sample_stride = 4
val_stride = 8
"""


def _constant_dataset(root, value=1e-8, years=(2017,), days=3):
    cat = VariableCatalog()
    w = DatasetWriter(root, LatLonGrid.global_grid(5.625), {"kind": "test"})
    for v in ("pm2p5", "pm10", "pm1"):
        w.add_variable(cat[v], 1)
    for y in years:
        t = np.datetime64(f"{y}-01-01T00", "h") + np.arange(24 * days) * np.timedelta64(1, "h")
        for v in ("pm2p5", "pm10", "pm1"):
            w.write(v, y, t, np.full((t.size, 1, 32, 64), value, dtype=np.float32))
    w.close()


@pytest.fixture(scope="module")
def aligned(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--seed", "2", "--years", "2015-2017", "--days", "3", "--out", str(base / "raw")]) == 0
    assert main(["align", "--in", str(base / "raw"), "--out", str(base / "al")]) == 0
    (base / "tiny.cfg").write_text(TINY)
    return base


def test_persistence_constant_data_zero(tmp_path):
    _constant_dataset(tmp_path / "d")
    rc = main(["eval", "--persistence", "--data", str(tmp_path / "d"), "--preset", "3PM", "--leads", "6,24",
               "--test-years", "2017", "--out", str(tmp_path / "r")])
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    for by_mode in rep["regions"].values():
        for r in by_mode.values():
            for entry in r["leads"].values():
                for m in entry["channels"].values():
                    assert m["rmse_lat"] == 0.0 and m["rmse"] == 0.0


def test_train_then_eval_round_trip(aligned, tmp_path):
    cfg = str(aligned / "tiny.cfg")
    assert main(["train", "--data", str(aligned / "al"), "--out", str(tmp_path / "run"), "--config", cfg,
                 "--max-steps", "3"]) == 0
    for f in ("best.ckpt", "history.csv", "timing.csv", "steps.csv", "config.txt"):
        assert (tmp_path / "run" / f).is_file()
    header, params = load_checkpoint(tmp_path / "run" / "best.ckpt")
    assert header["config"]["embed_dim"] == 8 and header["seed"] == 42
    assert main(["eval", "--ckpt", str(tmp_path / "run" / "best.ckpt"), "--data", str(aligned / "al"),
                 "--leads", "6,24", "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    ch = rep["meta"]["checkpoint_header"]
    assert ch["config"] == header["config"] and ch["model"] == header["model"] and ch["seed"] == header["seed"]
    assert set(rep["regions"]["mena"]) == {"test", "baseline"}


def test_stats_then_train(aligned, tmp_path):
    assert main(["stats", "--data", str(aligned / "al"), "--out", str(tmp_path / "st"),
                 "--config", str(aligned / "tiny.cfg")]) == 0
    assert (tmp_path / "st" / "freq_tables.json").is_file()
    assert main(["train", "--data", str(aligned / "al"), "--out", str(tmp_path / "run"), "--stats",
                 str(tmp_path / "st"), "--config", str(aligned / "tiny.cfg"), "--max-steps", "2"]) == 0


def test_seeds_format(aligned, tmp_path):
    assert main(["seeds", "--n", "2", "--data", str(aligned / "al"), "--out", str(tmp_path / "s"),
                 "--config", str(aligned / "tiny.cfg"), "--max-steps", "2"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "seeds.csv")))
    assert {r["channel"] for r in rows} == {"pm2p5", "pm10", "pm1"}
    for r in rows:
        vals = [float(r["seed_42"]), float(r["seed_43"])]
        assert float(r["mean"]) == pytest.approx(np.mean(vals), rel=1e-12)
        assert float(r["std"]) == pytest.approx(np.std(vals, ddof=1), rel=1e-12)
        assert re.fullmatch(r"-?\d+\.\d{2} \(\d+\.\d{2}\)", r["formatted"])


def test_seed_summary_string():
    mean, std, txt = seed_summary([1.0, 2.0, 3.0])
    assert (mean, std, txt) == (2.0, 1.0, "2.00 (1.00)")


def test_errormap_and_hist(aligned, tmp_path):
    assert main(["errormap", "--persistence", "--data", str(aligned / "al"), "--date", "2017-01-01T00",
                 "--lead", "24", "--out", str(tmp_path / "em")]) == 0
    lines = (tmp_path / "em" / "pm2p5_error.csv").read_text().splitlines()
    assert lines[0] == "lat,lon,error" and len(lines) == 1 + 8 * 14
    assert main(["hist", "--data", str(aligned / "al"), "--split", "train", "--config", str(aligned / "tiny.cfg"),
                 "--clip", "10", "--out", str(tmp_path / "h.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert max(int(r["count_display"]) for r in rows) == 10
    assert all(int(r["count_display"]) == min(int(r["count"]), 10) for r in rows)


def test_exit_usage(aligned, tmp_path):
    assert main(["eval", "--persistence", "--data", str(aligned / "al"), "--preset", "Weather+Chemistry",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["eval", "--persistence", "--data", str(aligned / "al"), "--region", "atlantis",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    (tmp_path / "c.cfg").write_text("preset = 3PM\n")
    assert main(["eval", "--persistence", "--data", str(aligned / "al"), "--config", str(tmp_path / "c.cfg"),
                 "--preset", "AQ", "--out", str(tmp_path)]) == EXIT_USAGE
    (tmp_path / "bad.cfg").write_text("learning_rte = 1\n")
    assert main(["train", "--data", str(aligned / "al"), "--config", str(tmp_path / "bad.cfg"),
                 "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--data", "x", "--out", "y"])
    assert exc.value.code == 2


def test_exit_data(aligned, tmp_path):
    assert main(["eval", "--persistence", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["eval", "--persistence", "--data", str(aligned / "al"), "--leads", "500",
                 "--out", str(tmp_path)]) == EXIT_DATA
    # raw 3-hourly AQ must be aligned before use
    assert main(["eval", "--persistence", "--data", str(aligned / "raw"), "--out", str(tmp_path)]) == EXIT_DATA


def test_exit_numeric(tmp_path):
    _constant_dataset(tmp_path / "d", value=np.nan, years=(2003,))
    assert main(["stats", "--data", str(tmp_path / "d"), "--preset", "3PM", "--out", str(tmp_path / "s")]) \
        == EXIT_NUMERIC
