"""Training: prepared tensors, AdamW, randomized lead times and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from pmcast import transform
from pmcast.align import Cube, build_sample_index, select_preset
from pmcast.config import TrainConfig
from pmcast.grid import latitude_weights, parse_region
from pmcast.histo import FrequencyTable, build_frequency_table
from pmcast.io import load_cube, save_checkpoint
from pmcast.loss import fmae_loss
from pmcast.model import Model, ModelConfig, ParamStore

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    """Raised on non-finite losses or gradients."""


@dataclass
class Prepared:
    """Model-space tensors for one split, plus per-pixel AQ frequency weights."""

    times: np.ndarray
    x: np.ndarray  # [T, C, H, W] model space (float32 storage)
    wf: np.ndarray  # [T, Va, H, W] frequency weights of each timestamp as a target
    w_lat: np.ndarray
    weather_idx: np.ndarray
    aq_idx: np.ndarray
    channels: tuple[str, ...]

    @property
    def shape(self):
        return self.x.shape


def fit_tables(cube: Cube, beta: float) -> dict[str, FrequencyTable]:
    """Frequency tables on raw (working-unit) AQ values of a training cube."""
    return {
        cube.channels[c].name: build_frequency_table(cube.values[:, c], beta, cube.channels[c].name)
        for c in cube.aq_idx
    }


def fit_normalization(cube: Cube, aq_kind: str = "log_then_zscore") -> transform.NormStats:
    return transform.fit_stats(cube.values, cube.channel_names, [c.is_aq for c in cube.channels], aq_kind)


def prepare(cube: Cube, stats: transform.NormStats, tables: Optional[dict[str, FrequencyTable]]) -> Prepared:
    st = stats.subset(cube.channel_names)
    x = transform.apply(cube.values, st, axis=1).astype(np.float32)
    aq = cube.aq_idx
    wf = np.ones((cube.values.shape[0], aq.size) + cube.grid.shape, dtype=np.float32)
    if tables is not None:
        for k, c in enumerate(aq):
            name = cube.channels[c].name
            if name not in tables:
                raise TrainError(f"missing frequency table for AQ channel {name!r}")
            wf[:, k] = tables[name].weights_for(cube.values[:, c])
    return Prepared(cube.times, x, wf, latitude_weights(cube.grid), cube.weather_idx, aq, cube.channel_names)


def sample_lead_time(rng: np.random.Generator, pool: Sequence[int]) -> int:
    """Uniform draw from the lead-time pool."""
    if len(pool) == 0:
        raise ValueError("lead-time pool is empty")
    return int(pool[int(rng.integers(len(pool)))])


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: ParamStore, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.params.items()}

    def step(self, grads: Optional[dict] = None, lr: Optional[float] = None) -> None:
        grads = self.params.grads if grads is None else grads
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient in {k!r}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params: ParamStore, grads: dict, state: AdamW, lr: Optional[float] = None) -> ParamStore:
    state.step(grads, lr)
    return params


@dataclass
class TrainResult:
    params: ParamStore
    history: list = field(default_factory=list)
    step_log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    epochs_run: int = 0
    steps: int = 0


def build_model(cfg: TrainConfig, data: Prepared) -> Model:
    _, _, H, W = data.shape
    mc = ModelConfig(weather_channels=int(data.weather_idx.size), aq_channels=int(data.aq_idx.size),
                     img_h=H, img_w=W, **cfg.model_kwargs())
    return Model(mc)


def batch_loss(model: Model, data: Prepared, inp, tgt, leads, cfg: TrainConfig, grad: bool):
    x = data.x[inp].astype(np.float64)
    t = data.x[tgt].astype(np.float64)
    f = model.forward(x, np.asarray(leads, dtype=np.float64), keep_cache=grad)
    wf = data.wf[tgt].astype(np.float64) if cfg.loss == "fmae" else None
    return fmae_loss(f.weather, f.aq, t[:, data.weather_idx], t[:, data.aq_idx], data.w_lat,
                     weights=wf, mode=cfg.loss, normalize=cfg.normalize_loss)


def training_index(data: Prepared, cfg: TrainConfig):
    """Timestamps usable with every lead in the pool (targets inside the split)."""
    idx = build_sample_index(data.times, cfg.lead_time_pool)
    ok = {}
    for i, L in zip(idx.input_idx, idx.lead_hours):
        ok.setdefault(int(i), set()).add(int(L))
    need = set(cfg.lead_time_pool)
    base = np.array(sorted(i for i, s in ok.items() if s == need), dtype=np.int64)
    pos = {int(v): i for i, v in enumerate(data.times.astype(np.int64))}
    return base[:: cfg.sample_stride], pos


def evaluate_loss(model: Model, data: Prepared, cfg: TrainConfig, lead: Optional[int] = None,
                  rng: Optional[np.random.Generator] = None, batch: int = 64) -> float:
    """Mean loss over the split at a fixed lead (sample-weighted across batches)."""
    lead = cfg.val_lead if lead is None else lead
    if rng is not None:
        base, pos = training_index(data, cfg)
        leads = np.array([sample_lead_time(rng, cfg.lead_time_pool) for _ in base], dtype=np.int64)
        tgts = np.array([pos[int(data.times[i].astype(np.int64)) + int(L)] for i, L in zip(base, leads)], dtype=np.int64)
        inp = base
    else:
        idx = build_sample_index(data.times, [lead])
        inp, tgts, leads = idx.input_idx[:: cfg.val_stride], idx.target_idx[:: cfg.val_stride], idx.lead_hours[:: cfg.val_stride]
    if inp.size == 0:
        raise TrainError("validation split has no samples at the requested lead")
    total = 0.0
    for s in range(0, inp.size, batch):
        sl = slice(s, s + batch)
        br = batch_loss(model, data, inp[sl], tgts[sl], leads[sl], cfg, grad=False)
        total += br.total * inp[sl].size
    return total / inp.size


def train_loop(train: Prepared, val: Prepared, cfg: TrainConfig, model: Optional[Model] = None,
               on_best: Optional[Callable[[ParamStore, int, float], None]] = None,
               max_steps: Optional[int] = None) -> TrainResult:
    """Seeded epochs of shuffled, lead-randomized AdamW steps with early stopping.

    Validation always runs at ``cfg.val_lead`` unless ``cfg.val_randomize_lead``.
    The best-validation parameters are returned (and passed to ``on_best``).
    """
    model = model or build_model(cfg, train)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.weight_decay)
    base, pos = training_index(train, cfg)
    if base.size == 0:
        raise TrainError("training split has no usable samples for the lead-time pool")
    times64 = train.times.astype(np.int64)
    res = TrainResult(params=model.params.copy())
    bad_epochs = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = cfg.learning_rate
        if cfg.cosine_decay:
            lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.max_epochs))
        order = base[rng.permutation(base.size)]
        leads = np.array([sample_lead_time(rng, cfg.lead_time_pool) for _ in order], dtype=np.int64)
        tgts = np.array([pos[int(times64[i]) + int(L)] for i, L in zip(order, leads)], dtype=np.int64)
        run_loss = 0.0
        seen = 0
        for s in range(0, order.size, cfg.batch_size):
            sl = slice(s, s + cfg.batch_size)
            br = batch_loss(model, train, order[sl], tgts[sl], leads[sl], cfg, grad=True)
            if not math.isfinite(br.total):
                raise TrainError(f"non-finite loss at epoch {epoch} step {step}: {br.total}")
            model.backward(br.grad_weather, br.grad_aq)
            opt.step(lr=lr)
            step += 1
            n = order[sl].size
            run_loss += br.total * n
            seen += n
            uniq = "|".join(str(v) for v in np.unique(leads[sl]))
            res.step_log.append({"step": step, "lead_time": uniq, "weather_term": br.weather_term,
                                 "chemical_term": br.chemical_term, "total": br.total})
            if max_steps is not None and step >= max_steps:
                break
        val_rng = np.random.default_rng(cfg.seed + 1) if cfg.val_randomize_lead else None
        val_loss = evaluate_loss(model, val, cfg, rng=val_rng)
        if not math.isfinite(val_loss):
            raise TrainError(f"non-finite validation loss at epoch {epoch}")
        res.history.append({"epoch": epoch, "train_loss": run_loss / seen, "val_loss": val_loss,
                            "lr": lr, "wall_time": time.perf_counter() - t0})
        log.info("epoch %d train %.6f val %.6f", epoch, run_loss / seen, val_loss)
        res.epochs_run = epoch
        if val_loss < res.best_val:
            res.best_val = val_loss
            res.best_epoch = epoch
            res.params = model.params.copy()
            bad_epochs = 0
            if on_best is not None:
                on_best(res.params, epoch, val_loss)
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
        if max_steps is not None and step >= max_steps:
            break
    res.steps = step
    return res


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "lr")


def write_history(path, history: list, timing_path=None) -> None:
    """History CSV (deterministic columns); wall times go to a separate file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])
    if timing_path is not None:
        with open(timing_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("epoch", "wall_time"))
            for h in history:
                w.writerow([h["epoch"], f"{h['wall_time']:.6f}"])


def write_step_log(path, step_log: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "lead_time", "weather_term", "chemical_term", "total"))
        for r in step_log:
            w.writerow([r["step"], r["lead_time"], repr(r["weather_term"]), repr(r["chemical_term"]), repr(r["total"])])


def load_split(ds, cfg: TrainConfig, split: str) -> Cube:
    """Region-cropped cube of the preset channels for one split's years."""
    a, b = cfg.splits[split]
    cube = load_cube(ds, select_preset(cfg.preset), parse_region(cfg.region), range(a, b + 1))
    if cube.times.size == 0:
        raise TrainError(f"{split} split ({a}-{b}) has no data in {ds.root}")
    return cube


def checkpoint_header(cfg: TrainConfig, model: Model, stats: transform.NormStats, channels, epoch: int,
                      val_loss: float) -> dict:
    return {"config": cfg.to_dict(), "model": model.cfg.to_dict(), "channels": list(channels),
            "norm_stats": stats.subset(channels).to_dict(), "epoch": int(epoch), "val_loss": float(val_loss),
            "seed": int(cfg.seed)}


def run_training(ds, cfg: TrainConfig, out_dir=None, stats: Optional[transform.NormStats] = None,
                 tables: Optional[dict] = None, max_steps: Optional[int] = None):
    """Fit statistics on the train split, train, and write checkpoint + logs to ``out_dir``.

    Returns (TrainResult, model config, norm stats, channel names).
    """
    train_cube = load_split(ds, cfg, "train")
    val_cube = load_split(ds, cfg, "val")
    stats = stats or fit_normalization(train_cube, cfg.aq_transform)
    if tables is None and cfg.loss == "fmae":
        tables = fit_tables(train_cube, cfg.beta)
    elif tables is not None:
        tables = {k: t.with_beta(cfg.beta) for k, t in tables.items()}
    tr = prepare(train_cube, stats, tables if cfg.loss == "fmae" else None)
    va = prepare(val_cube, stats, tables if cfg.loss == "fmae" else None)
    model = build_model(cfg, tr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def on_best(params: ParamStore, epoch: int, val_loss: float) -> None:
        if out is not None:
            save_checkpoint(out / "best.ckpt", params,
                            checkpoint_header(cfg, model, stats, tr.channels, epoch, val_loss))

    res = train_loop(tr, va, cfg, model, on_best=on_best, max_steps=max_steps)
    if out is not None:
        write_history(out / "history.csv", res.history, out / "timing.csv")
        write_step_log(out / "steps.csv", res.step_log)
    return res, model.cfg, stats, tr.channels
