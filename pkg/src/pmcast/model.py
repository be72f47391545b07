"""Dual-head vision transformer forecaster with exact reverse-mode gradients.

Pipeline: per-variable patch embedding -> cross-attention aggregation over
variables -> positional + lead-time embedding -> pre-norm transformer blocks
-> final norm -> separate linear heads for weather and AQ channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from pmcast import layers as L


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    weather_channels: int
    aq_channels: int
    img_h: int
    img_w: int
    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0
    lead_dim: int = 32
    lead_scale: float = 24.0
    ln_eps: float = 1e-5
    init_std: float = 0.02
    activation: str = "gelu_tanh"
    seed: int = 42

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or self.img_h % p or self.img_w % p:
            raise ModelError(f"input {self.img_h}x{self.img_w} not divisible by patch size {p}")
        if self.embed_dim % self.num_heads:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.weather_channels + self.aq_channels < 1:
            raise ModelError("model needs at least one channel")
        if self.activation != "gelu_tanh":
            raise ModelError(f"unsupported activation {self.activation!r}")

    @property
    def n_vars(self) -> int:
        return self.weather_channels + self.aq_channels

    @property
    def n_tokens(self) -> int:
        return (self.img_h // self.patch_size) * (self.img_w // self.patch_size)

    @property
    def mlp_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, pp, V = cfg.embed_dim, cfg.patch_size**2, cfg.n_vars
    M, Dl, N = cfg.mlp_dim, cfg.lead_dim, cfg.n_tokens
    s: dict[str, tuple[int, ...]] = {
        "embed.w": (V, pp, D),
        "embed.b": (V, D),
        "agg.query": (D,),
    }
    for n in ("q", "k", "v", "o"):
        s[f"agg.w{n}"] = (D, D)
        s[f"agg.b{n}"] = (D,)
    s["pos"] = (N, D)
    s.update({"lead.w1": (Dl,), "lead.b1": (Dl,), "lead.w2": (Dl, D), "lead.b2": (D,)})
    for i in range(cfg.depth):
        b = f"blk{i}."
        s.update({
            b + "ln1.g": (D,), b + "ln1.b": (D,),
            b + "attn.wqkv": (D, 3 * D), b + "attn.bqkv": (3 * D,),
            b + "attn.wo": (D, D), b + "attn.bo": (D,),
            b + "ln2.g": (D,), b + "ln2.b": (D,),
            b + "mlp.w1": (D, M), b + "mlp.b1": (M,),
            b + "mlp.w2": (M, D), b + "mlp.b2": (D,),
        })
    s.update({"norm.g": (D,), "norm.b": (D,)})
    s.update({
        "head_w.w": (D, pp * cfg.weather_channels), "head_w.b": (pp * cfg.weather_channels,),
        "head_aq.w": (D, pp * cfg.aq_channels), "head_aq.b": (pp * cfg.aq_channels,),
    })
    return s


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    D, pp, V = cfg.embed_dim, cfg.patch_size**2, cfg.n_vars
    M, Dl, N = cfg.mlp_dim, cfg.lead_dim, cfg.n_tokens
    embed = V * pp * D + V * D
    agg = D + 4 * (D * D + D)
    lead = 2 * Dl + Dl * D + D
    block = 4 * D + (D * 3 * D + 3 * D) + (D * D + D) + (D * M + M) + (M * D + D)
    heads = (D + 1) * pp * V
    return embed + agg + N * D + lead + cfg.depth * block + 2 * D + heads


class ParamStore:
    """Named parameter tensors with same-shaped gradient buffers."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ParamStore":
        rng = np.random.default_rng(cfg.seed)
        out = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                out[name] = np.ones(shape)
            elif leaf.startswith("b") and name != "agg.query":
                out[name] = np.zeros(shape)
            else:
                out[name] = _trunc_normal(rng, shape, cfg.init_std)
        return cls(out)


def _trunc_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


@dataclass
class Forecast:
    weather: np.ndarray
    aq: np.ndarray
    lead_time_hours: object


# ---------------------------------------------------------------------------
# stage functions (usable on their own; each returns (out, cache))
# ---------------------------------------------------------------------------


def tokenize_variables(x, params, cfg: ModelConfig):
    """[B, V, H, W] -> tokens [B, V, N, D] with separate weights per variable."""
    x = np.asarray(x, dtype=np.float64)
    B, V, H, W = x.shape
    p = cfg.patch_size
    if H % p or W % p:
        raise ModelError(f"input {H}x{W} not divisible by patch size {p}")
    if V != params["embed.w"].shape[0]:
        raise ModelError(f"model expects {params['embed.w'].shape[0]} variables, got {V}")
    patches = L.patchify_vars(x, p)
    tok = np.einsum("bvnp,vpd->bvnd", patches, params["embed.w"]) + params["embed.b"][None, :, None, :]
    return tok, patches


def aggregate_variables(tokens, params, cfg: ModelConfig):
    """Collapse the variable axis with a learned-query cross-attention."""
    if tokens.shape[1] == 0:
        raise ModelError("cannot aggregate zero variables")
    return L.cross_attention_fwd(tokens, params, "agg.", cfg.num_heads)


def lead_embedding(lead_hours, params, cfg: ModelConfig):
    s = np.asarray(lead_hours, dtype=np.float64).reshape(-1) / cfg.lead_scale
    z1 = s[:, None] * params["lead.w1"] + params["lead.b1"]
    h1, gcache = L.gelu_fwd(z1)
    e = h1 @ params["lead.w2"] + params["lead.b2"]
    return e, (s, h1, gcache)


def encode(seq, lead_hours, params, cfg: ModelConfig):
    """Add positional and lead-time embeddings, then run the transformer blocks."""
    lead = np.asarray(lead_hours, dtype=np.float64).reshape(-1)
    if np.any(lead <= 0):
        raise ModelError("lead time must be positive")
    B = seq.shape[0]
    if lead.size == 1 and B > 1:
        lead = np.full(B, lead[0])
    e, lcache = lead_embedding(lead, params, cfg)
    x = seq + params["pos"][None] + e[:, None, :]
    caches = []
    for i in range(cfg.depth):
        b = f"blk{i}."
        h1, ln1 = L.layernorm_fwd(x, params[b + "ln1.g"], params[b + "ln1.b"], cfg.ln_eps)
        a, acache = L.self_attention_fwd(h1, params, b + "attn.", cfg.num_heads)
        x = x + a
        h2, ln2 = L.layernorm_fwd(x, params[b + "ln2.g"], params[b + "ln2.b"], cfg.ln_eps)
        z1, _ = L.linear_fwd(h2, params[b + "mlp.w1"], params[b + "mlp.b1"])
        g, gcache = L.gelu_fwd(z1)
        m, _ = L.linear_fwd(g, params[b + "mlp.w2"], params[b + "mlp.b2"])
        x = x + m
        if not np.all(np.isfinite(x)):
            raise ModelError(f"non-finite activation after encoder block {i}")
        caches.append((ln1, acache, ln2, h2, gcache, g))
    return x, (lcache, caches)


def decode_dual(encoded, params, cfg: ModelConfig):
    """Final norm, then independent linear heads un-patched to [B, V, H, W]."""
    p, H, W = cfg.patch_size, cfg.img_h, cfg.img_w
    y, ncache = L.layernorm_fwd(encoded, params["norm.g"], params["norm.b"], cfg.ln_eps)
    tw, _ = L.linear_fwd(y, params["head_w.w"], params["head_w.b"])
    ta, _ = L.linear_fwd(y, params["head_aq.w"], params["head_aq.b"])
    weather = L.unpatchify(tw, p, cfg.weather_channels, H, W)
    aq = L.unpatchify(ta, p, cfg.aq_channels, H, W)
    return (weather, aq), (y, ncache)


class Model:
    """Forecaster holding a config, a ParamStore and the last forward's cache."""

    def __init__(self, cfg: ModelConfig, params: Optional[ParamStore] = None):
        self.cfg = cfg
        self.params = params if params is not None else ParamStore.init(cfg)
        shapes = param_shapes(cfg)
        for k, shp in shapes.items():
            if k not in self.params.params or self.params[k].shape != shp:
                raise ModelError(f"parameter {k!r} missing or misshaped for this config")
        self._cache = None

    def forward(self, x, lead_hours, keep_cache: bool = True) -> Forecast:
        x = np.asarray(x, dtype=np.float64)
        unbatched = x.ndim == 3
        if unbatched:
            x = x[None]
        cfg, P = self.cfg, self.params.params
        tok, patches = tokenize_variables(x, P, cfg)
        seq, acache = aggregate_variables(tok, P, cfg)
        enc, ecache = encode(seq, lead_hours, P, cfg)
        (w, a), dcache = decode_dual(enc, P, cfg)
        self._cache = (patches, acache, ecache, enc, dcache) if keep_cache else None
        if unbatched:
            w, a = w[0], a[0]
        return Forecast(w, a, lead_hours)

    def backward(self, grad_weather, grad_aq) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of a scalar loss given dL/d(outputs).

        Gradients overwrite ``params.grads``; the cache is consumed.
        """
        if self._cache is None:
            raise ModelError("backward called without a preceding forward")
        patches, acache, ecache, enc, dcache = self._cache
        self._cache = None
        cfg, P = self.cfg, self.params.params
        p = cfg.patch_size
        gw = np.asarray(grad_weather, dtype=np.float64)
        ga = np.asarray(grad_aq, dtype=np.float64)
        if gw.ndim == 3:
            gw, ga = gw[None], ga[None]
        G: dict[str, np.ndarray] = {}

        # heads + final norm
        y, ncache = dcache
        dtw = L.patchify(gw, p)
        dta = L.patchify(ga, p)
        dy_w, G["head_w.w"], G["head_w.b"] = L.linear_bwd(dtw, y, P["head_w.w"])
        dy_a, G["head_aq.w"], G["head_aq.b"] = L.linear_bwd(dta, y, P["head_aq.w"])
        dx, G["norm.g"], G["norm.b"] = L.layernorm_bwd(dy_w + dy_a, ncache)

        # encoder blocks
        lcache, caches = ecache
        for i in reversed(range(cfg.depth)):
            b = f"blk{i}."
            ln1, acache_i, ln2, h2, gcache, g = caches[i]
            dg, G[b + "mlp.w2"], G[b + "mlp.b2"] = L.linear_bwd(dx, g, P[b + "mlp.w2"])
            dz1 = L.gelu_bwd(dg, gcache)
            dh2, G[b + "mlp.w1"], G[b + "mlp.b1"] = L.linear_bwd(dz1, h2, P[b + "mlp.w1"])
            dln2, G[b + "ln2.g"], G[b + "ln2.b"] = L.layernorm_bwd(dh2, ln2)
            dx = dx + dln2
            dh1, ag = L.self_attention_bwd(dx, acache_i, P, b + "attn.", cfg.num_heads)
            G.update(ag)
            dln1, G[b + "ln1.g"], G[b + "ln1.b"] = L.layernorm_bwd(dh1, ln1)
            dx = dx + dln1

        # positional + lead embeddings
        G["pos"] = dx.sum(axis=0)
        s, h1, lg = lcache
        de = dx.sum(axis=1)
        G["lead.w2"] = h1.T @ de
        G["lead.b2"] = de.sum(axis=0)
        dz = L.gelu_bwd(de @ P["lead.w2"].T, lg)
        G["lead.w1"] = (s[:, None] * dz).sum(axis=0)
        G["lead.b1"] = dz.sum(axis=0)

        # aggregation + per-variable embedding
        dtok, ag = L.cross_attention_bwd(dx, acache, P, "agg.", cfg.num_heads)
        G.update(ag)
        G["embed.w"] = np.einsum("bvnp,bvnd->vpd", patches, dtok)
        G["embed.b"] = dtok.sum(axis=(0, 2))

        for k, v in G.items():
            self.params.grads[k][...] = v
        return self.params.grads

    def predict(self, x, lead_hours) -> Forecast:
        return self.forward(x, lead_hours, keep_cache=False)
