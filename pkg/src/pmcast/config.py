"""Run configuration: training defaults and a flat ``key = value`` config file.

Example file::

    # lines starting with # are comments
    learning_rate = 5e-4
    batch_size = 32
    lead_time_pool = 6, 12, 24
    train_years = 2003-2015
    embed_dim = 64
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def _years(v: str) -> tuple[int, int]:
    v = v.strip()
    if "-" in v:
        a, b = v.split("-", 1)
        return int(a), int(b)
    return int(v), int(v)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    lead_time_pool: tuple[int, ...] = (6, 12, 24)
    val_lead: int = 24
    val_randomize_lead: bool = False
    beta: float = 0.8
    seed: int = 42
    loss: str = "fmae"
    normalize_loss: bool = True
    weight_decay: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cosine_decay: bool = False
    aq_transform: str = "log_then_zscore"
    train_years: tuple[int, int] = (2003, 2015)
    val_years: tuple[int, int] = (2016, 2016)
    test_years: tuple[int, int] = (2017, 2018)
    sample_stride: int = 1
    val_stride: int = 1
    # model hyperparameters
    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0
    lead_dim: int = 32
    # data selection
    preset: str = "SurfaceWeather+SurfaceAQ"
    region: str = "mena"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.lead_time_pool:
            raise ConfigError("lead_time_pool must be non-empty")
        if any(int(x) <= 0 for x in self.lead_time_pool):
            raise ConfigError("lead times must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.loss not in ("fmae", "mae"):
            raise ConfigError(f"loss must be fmae or mae, got {self.loss!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must lie in [0, 1)")
        self.lead_time_pool = tuple(int(x) for x in self.lead_time_pool)

    @property
    def splits(self) -> dict[str, tuple[int, int]]:
        return {"train": tuple(self.train_years), "val": tuple(self.val_years), "test": tuple(self.test_years)}

    def model_kwargs(self) -> dict:
        return dict(patch_size=self.patch_size, embed_dim=self.embed_dim, depth=self.depth,
                    num_heads=self.num_heads, mlp_ratio=self.mlp_ratio, lead_dim=self.lead_dim, seed=self.seed)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k in names:
                kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


def _convert(name: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    if name.endswith("_years"):
        return _years(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(";", ",").split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    base = base or TrainConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for key, raw in cp["run"].items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = _convert(key, raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return replace(base, **updates)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    return parse_config_text(p.read_text(), base)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name.endswith("_years"):
            v = f"{v[0]}-{v[1]}"
        elif isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
