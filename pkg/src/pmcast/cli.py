"""Command-line entry point: ``pmcast <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from pmcast import evaluate as ev
from pmcast import histo, io, synth, train, transform
from pmcast.align import AlignError, select_preset, to_hours
from pmcast.config import ConfigError, TrainConfig, dump_config, load_config
from pmcast.grid import REGIONS, GridError, parse_region
from pmcast.model import Model, ModelConfig, ModelError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("pmcast")


class UsageError(Exception):
    pass


def _years(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    for flag in ("preset", "region"):
        val = getattr(args, flag, None)
        if val is None:
            continue
        if getattr(args, "config", None) and getattr(cfg, flag) != getattr(TrainConfig(), flag) \
                and getattr(cfg, flag) != val:
            raise UsageError(f"--{flag} {val!r} conflicts with {flag} = {getattr(cfg, flag)!r} in {args.config}")
        cfg = replace(cfg, **{flag: val})
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    try:
        select_preset(cfg.preset)
        _regions(cfg.region)
    except (AlignError, GridError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _regions(text: str) -> list[str]:
    """A single region, or a comma list of presets (a region sweep)."""
    parts = [r.strip() for r in text.split(",") if r.strip()]
    if len(parts) > 1 and all(r.lower().replace("-", "_") in REGIONS for r in parts):
        return parts
    parse_region(text)
    return [text]


def _load_ckpt(path):
    header, params = io.load_checkpoint(path)
    model = Model(ModelConfig.from_dict(header["model"]), params)
    stats = transform.NormStats.from_dict(header["norm_stats"])
    return header, model, stats


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    variables = None if args.preset.lower() == "all" else args.preset
    synth.generate(args.out, seed=args.seed, years=_years(args.years), resolution_deg=args.resolution,
                   days_per_year=args.days, variables=variables)
    print(f"wrote synthetic dataset to {args.out}")
    return EXIT_OK


def cmd_align(args) -> int:
    src = io.Dataset(args.inp)
    rep = io.align_dataset(src, args.out, args.resolution, args.method, hourly=args.hourly)
    print(json.dumps(rep["years"], sort_keys=True))
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _config(args)
    ds = io.Dataset(args.data)
    cube = train.load_split(ds, cfg, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train.fit_normalization(cube, cfg.aq_transform).save(out / "norm_stats.json")
    histo.save_tables(train.fit_tables(cube, args.beta), out / "freq_tables.json")
    print(f"fitted {len(cube.channels)} channels on {cube.times.size} {args.split} timestamps -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = io.Dataset(args.data)
    stats = tables = None
    if args.stats:
        stats = transform.NormStats.load(Path(args.stats) / "norm_stats.json")
        tables = histo.load_tables(Path(args.stats) / "freq_tables.json")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    res, _, _, _ = train.run_training(ds, cfg, out, stats, tables, max_steps=args.max_steps)
    print(f"best epoch {res.best_epoch} val_loss {res.best_val:.6g} after {res.steps} steps -> {out / 'best.ckpt'}")
    return EXIT_OK


def _forecaster_for(args, cfg: TrainConfig):
    """(make_forecaster(cube), channel list, meta) for the chosen forecast source."""
    if args.ckpt:
        header, model, stats = _load_ckpt(args.ckpt)
        ccfg = TrainConfig.from_dict(header["config"])
        channels = header["channels"]
        meta = {"source": "checkpoint", "checkpoint_header": {k: header[k] for k in ("config", "model", "epoch", "seed")}}
        return (lambda cube: ev.ModelForecaster(model, stats, channels)), ccfg, meta
    if args.external:
        fds = io.Dataset(args.external)
        ext = ev.ExternalForecaster(fds)
        return (lambda cube: ext), cfg, {"source": "external", "lead_time_hours": ext.lead}
    return (lambda cube: ev.Persistence()), cfg, {"source": "persistence"}


def cmd_eval(args) -> int:
    cfg = _config(args)
    make, cfg, meta = _forecaster_for(args, cfg)
    leads = _ints(args.leads)
    ds = io.Dataset(args.data)
    regions = _regions(args.region or cfg.region)
    test_years = tuple(_years(args.test_years)[i] for i in (0, -1)) if args.test_years else cfg.test_years
    channels = select_preset(cfg.preset)
    years = range(test_years[0], test_years[1] + 1)
    reports: dict = {}
    for region in regions:
        try:
            bbox = parse_region(region)
        except GridError as exc:
            raise UsageError(str(exc)) from None
        cube = io.load_cube(ds, channels, bbox, years)
        if cube.times.size == 0:
            raise io.DataError(f"no test-split data ({test_years[0]}-{test_years[1]}) in {ds.root}")
        fc = make(cube)
        reports[region] = {m.name: ev.evaluate(fc, cube, leads, m) for m in ev.standard_modes(test_years)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta.update({"leads": leads, "regions": regions, "test_years": list(test_years), "preset": cfg.preset})
    ev.write_reports(reports, out / "report.json", out / "report.csv", meta)
    _print_summary(reports)
    return EXIT_OK


def _print_summary(reports: dict) -> None:
    for region, by_mode in reports.items():
        rep = by_mode.get("test") or next(iter(by_mode.values()))
        for lead, entry in rep["leads"].items():
            pm = {k: v["rmse_lat"] for k, v in entry["channels"].items() if k.startswith("pm")}
            txt = " ".join(f"{k}={v:.3f}" for k, v in pm.items())
            print(f"{region} lead {lead}h ({entry['n_samples']} samples): {txt}")


def cmd_errormap(args) -> int:
    cfg = _config(args)
    make, cfg, _ = _forecaster_for(args, cfg)
    ds = io.Dataset(args.data)
    bbox = parse_region(args.region or cfg.region)
    when = to_hours(np.datetime64(args.date.rstrip("Z")))
    year = int(str(when)[:4])
    cube = io.load_cube(ds, select_preset(cfg.preset), bbox, range(year, year + 2))
    pos = {int(t): i for i, t in enumerate(cube.times.astype(np.int64))}
    i = pos.get(int(when.astype(np.int64)))
    j = pos.get(int(when.astype(np.int64)) + args.lead)
    if i is None or j is None:
        raise io.DataError(f"no input at {when} or target {args.lead} h later in {ds.root}")
    if args.var not in cube.channel_names:
        raise UsageError(f"variable {args.var!r} is not a channel of preset {cfg.preset!r}")
    c = cube.channel_names.index(args.var)
    pred = make(cube).predict(cube, np.array([i]), args.lead)[0, c]
    err = ev.error_map(pred, cube.values[j, c])
    out = Path(args.out)
    ev.write_error_map(out, cube.grid, args.var, cube.units.get(args.var, ""), cube.times[j], err,
                       {"init_time": str(when), "lead_time_hours": args.lead, "region": args.region or cfg.region})
    print(f"error map {args.var} at {cube.times[j]}: mean {err.mean():.4g}, max |e| {np.abs(err).max():.4g} -> {out}")
    return EXIT_OK


def cmd_hist(args) -> int:
    cfg = _config(args)
    ds = io.Dataset(args.data)
    if args.split:
        cube = train.load_split(ds, cfg, args.split)
    else:
        cube = io.load_cube(ds, select_preset(cfg.preset), parse_region(cfg.region) if args.region else None)
    if args.var not in cube.channel_names:
        raise UsageError(f"variable {args.var!r} is not a channel of preset {cfg.preset!r}")
    table = histo.build_frequency_table(cube.values[:, cube.channel_names.index(args.var)], args.beta, args.var)
    table.write_csv(args.out, clip=args.clip)
    print(f"{table.n_bins} bins for {args.var} -> {args.out}")
    return EXIT_OK


def seed_summary(values: list[float]) -> tuple[float, float, str]:
    """Mean, sample std (ddof=1) and the ``mean (std)`` string."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std, f"{mean:.2f} ({std:.2f})"


def cmd_seeds(args) -> int:
    cfg = _config(args)
    ds = io.Dataset(args.data)
    leads = _ints(args.leads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_seed: dict[tuple[int, str], list[float]] = {}
    seeds = [cfg.seed + k for k in range(args.n)]
    test = train.load_split(ds, cfg, "test")
    mode = ev.EvalMode("test", cfg.test_years)
    for s in seeds:
        scfg = replace(cfg, seed=s)
        res, mc, stats, channels = train.run_training(ds, scfg, out / f"seed{s}", max_steps=args.max_steps)
        fc = ev.ModelForecaster(Model(mc, res.params), stats, channels)
        rep = ev.evaluate(fc, test, leads, mode)
        for lead, entry in rep["leads"].items():
            for ch, m in entry["channels"].items():
                if ch.startswith("pm"):
                    per_seed.setdefault((int(lead), ch), []).append(m["rmse_lat"])
    with open(out / "seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lead_hours", "channel", "mean", "std", "formatted"] + [f"seed_{s}" for s in seeds])
        for (lead, ch), vals in sorted(per_seed.items()):
            mean, std, txt = seed_summary(vals)
            w.writerow([lead, ch, repr(mean), repr(std), txt] + [repr(v) for v in vals])
            print(f"lead {lead}h {ch}: {txt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmcast", description="Multi-variable PM forecasting toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a deterministic synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--years", default="2003-2018", help="e.g. 2003-2018 or 2003,2004")
    g.add_argument("--out", required=True)
    g.add_argument("--days", type=int, default=8, help="days per year (0 = whole year)")
    g.add_argument("--resolution", type=float, default=5.625)
    g.add_argument("--preset", default="SurfaceWeather+SurfaceAQ", help="variable preset, or 'all'")
    g.set_defaults(func=cmd_gen_synth)

    a = sub.add_parser("align", help="regrid, interpolate to hourly and catalog-check")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--resolution", type=float, default=None)
    a.add_argument("--method", choices=("conservative", "bilinear"), default="conservative")
    a.add_argument("--hourly", action=argparse.BooleanOptionalAction, default=True)
    a.set_defaults(func=cmd_align)

    s = sub.add_parser("stats", help="fit normalization statistics and frequency tables")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.add_argument("--out", required=True)
    s.add_argument("--beta", type=float, default=histo.DEFAULT_BETA)
    _selection(s)
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="train a forecaster")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stats", help="directory written by `stats`")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    _selection(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a forecast source")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--persistence", action="store_true")
    src.add_argument("--external", help="forecast dataset directory")
    e.add_argument("--data", required=True)
    e.add_argument("--leads", default="6,12,24,48")
    e.add_argument("--test-years")
    e.add_argument("--out", required=True)
    _selection(e, region_help="preset, bounding box, or comma list of presets for a sweep")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("errormap", help="prediction minus truth raster for one date")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--persistence", action="store_true")
    m.add_argument("--data", required=True)
    m.add_argument("--date", required=True, help="initialisation time, e.g. 2017-07-01T00")
    m.add_argument("--lead", type=int, default=24)
    m.add_argument("--var", default="pm2p5")
    m.add_argument("--out", required=True)
    m.set_defaults(external=None)
    _selection(m)
    m.set_defaults(func=cmd_errormap)

    h = sub.add_parser("hist", help="value distribution of one channel as CSV")
    h.add_argument("--data", required=True)
    h.add_argument("--var", default="pm2p5")
    h.add_argument("--clip", type=int, default=None)
    h.add_argument("--beta", type=float, default=histo.DEFAULT_BETA)
    h.add_argument("--split", choices=("train", "val", "test"))
    h.add_argument("--out", required=True)
    _selection(h)
    h.set_defaults(func=cmd_hist)

    n = sub.add_parser("seeds", help="train and evaluate several seeds; report mean (std)")
    n.add_argument("--n", type=int, default=5)
    n.add_argument("--data", required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--leads", default="24")
    n.add_argument("--seed", type=int)
    n.add_argument("--max-steps", type=int)
    _selection(n)
    n.set_defaults(func=cmd_seeds)
    return p


def _selection(p, region_help="region preset or lat_min,lat_max,lon_min,lon_max"):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", default=None, help="variable preset")
    p.add_argument("--region", default=None, help=region_help)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "days", None) == 0:
        args.days = None
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"pmcast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (train.TrainError, FloatingPointError, ModelError, transform.TransformError) as exc:
        print(f"pmcast: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.DataError, FileNotFoundError, AlignError, GridError, ev.EvalError, histo.HistoError) as exc:
        print(f"pmcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
