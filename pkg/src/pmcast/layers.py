"""Forward/backward primitives for the numpy transformer.

Each ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns the input gradient plus a dict
of parameter gradients.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def linear_fwd(x, w, b):
    return x @ w + b, x


def linear_bwd(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layernorm_fwd(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_bwd(dy, cache):
    xhat, rstd, g = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def softmax(s, axis=-1):
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(da, a, axis=-1):
    return a * (da - (da * a).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# multi-head self-attention over tokens: x [B, N, D]
# ---------------------------------------------------------------------------


def self_attention_fwd(x, p, prefix, n_heads):
    B, N, D = x.shape
    dh = D // n_heads
    qkv, _ = linear_fwd(x, p[prefix + "wqkv"], p[prefix + "bqkv"])
    qkv = qkv.reshape(B, N, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # [B, h, N, dh]
    scale = 1.0 / math.sqrt(dh)
    a = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    out, _ = linear_fwd(o, p[prefix + "wo"], p[prefix + "bo"])
    return out, (x, q, k, v, a, o, scale)


def self_attention_bwd(dout, cache, p, prefix, n_heads):
    x, q, k, v, a, o, scale = cache
    B, N, D = x.shape
    dh = D // n_heads
    do, dwo, dbo = linear_bwd(dout, o, p[prefix + "wo"])
    do = do.reshape(B, N, n_heads, dh).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = softmax_bwd(da, a) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * D)
    dx, dwqkv, dbqkv = linear_bwd(dqkv, x, p[prefix + "wqkv"])
    return dx, {prefix + "wqkv": dwqkv, prefix + "bqkv": dbqkv, prefix + "wo": dwo, prefix + "bo": dbo}


# ---------------------------------------------------------------------------
# variable aggregation: learned query attends over V tokens per position
# tokens [B, V, N, D] -> [B, N, D]
# ---------------------------------------------------------------------------


def cross_attention_fwd(tokens, p, prefix, n_heads):
    B, V, N, D = tokens.shape
    dh = D // n_heads
    scale = 1.0 / math.sqrt(dh)
    q0, _ = linear_fwd(p[prefix + "query"], p[prefix + "wq"], p[prefix + "bq"])
    qh = q0.reshape(n_heads, dh)
    k, _ = linear_fwd(tokens, p[prefix + "wk"], p[prefix + "bk"])
    v, _ = linear_fwd(tokens, p[prefix + "wv"], p[prefix + "bv"])
    k = k.reshape(B, V, N, n_heads, dh)
    v = v.reshape(B, V, N, n_heads, dh)
    s = (k * qh).sum(axis=-1).transpose(0, 2, 3, 1) * scale  # [B, N, h, V]
    a = softmax(s)
    o = np.einsum("bnhv,bvnhd->bnhd", a, v).reshape(B, N, D)
    out, _ = linear_fwd(o, p[prefix + "wo"], p[prefix + "bo"])
    return out, (tokens, qh, k, v, a, o, scale)


def cross_attention_bwd(dout, cache, p, prefix, n_heads):
    tokens, qh, k, v, a, o, scale = cache
    B, V, N, D = tokens.shape
    dh = D // n_heads
    do, dwo, dbo = linear_bwd(dout, o, p[prefix + "wo"])
    do = do.reshape(B, N, n_heads, dh)
    da = np.einsum("bnhd,bvnhd->bnhv", do, v)
    dv = np.einsum("bnhv,bnhd->bvnhd", a, do).reshape(B, V, N, D)
    ds = softmax_bwd(da, a) * scale  # [B, N, h, V]
    dqh = np.einsum("bnhv,bvnhd->hd", ds, k)
    dk = (ds.transpose(0, 3, 1, 2)[..., None] * qh).reshape(B, V, N, D)
    dq0 = dqh.reshape(D)
    query = p[prefix + "query"]
    dtok_k, dwk, dbk = linear_bwd(dk, tokens, p[prefix + "wk"])
    dtok_v, dwv, dbv = linear_bwd(dv, tokens, p[prefix + "wv"])
    grads = {
        prefix + "query": p[prefix + "wq"] @ dq0,
        prefix + "wq": np.outer(query, dq0),
        prefix + "bq": dq0,
        prefix + "wk": dwk,
        prefix + "bk": dbk,
        prefix + "wv": dwv,
        prefix + "bv": dbv,
        prefix + "wo": dwo,
        prefix + "bo": dbo,
    }
    return dtok_k + dtok_v, grads


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify_vars(x, p):
    """[B, V, H, W] -> [B, V, N, p*p] with patches in row-major order."""
    B, V, H, W = x.shape
    h, w = H // p, W // p
    return x.reshape(B, V, h, p, w, p).transpose(0, 1, 2, 4, 3, 5).reshape(B, V, h * w, p * p)


def patchify(x, p):
    """[B, V, H, W] -> [B, N, V*p*p]; inverse of ``unpatchify``."""
    B, V, H, W = x.shape
    h, w = H // p, W // p
    return x.reshape(B, V, h, p, w, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, h * w, V * p * p)


def unpatchify(t, p, V, H, W):
    """[B, N, V*p*p] -> [B, V, H, W]."""
    B = t.shape[0]
    h, w = H // p, W // p
    return t.reshape(B, h, w, V, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(B, V, H, W)
