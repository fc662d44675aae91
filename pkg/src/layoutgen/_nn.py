"""Small network building blocks with explicit forward caches and backward passes."""
from __future__ import annotations

import math

import numpy as np

from .attention import sdpa, sdpa_adjoint
from .tensor import conv2d, conv2d_adjoint, silu, silu_adjoint


def conv_init(rng, cout, cin, k, gain=1.0):
    std = gain * math.sqrt(2.0 / (cin * k * k))
    return rng.standard_normal((cout, cin, k, k)) * std, np.zeros(cout)


def linear_init(rng, dout, din, gain=1.0):
    return rng.standard_normal((dout, din)) * gain / math.sqrt(din)


def timestep_features(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal features of t/T, shape B x dim."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) / T
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(200.0), half))
    ang = t[:, None] * freqs[None, :] * math.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------- residual block


def resblock(h, p, name):
    a1 = silu(h)
    c1 = conv2d(a1, p[f"{name}.a.w"], p[f"{name}.a.b"])
    a2 = silu(c1)
    c2 = conv2d(a2, p[f"{name}.b.w"], p[f"{name}.b.b"])
    return h + c2, (h, a1, c1, a2)


def conv_backward(x, g, p, name, grads):
    """Input cotangent of conv ``name``; records weight grads unless ``grads`` is None."""
    dx, dw, db = conv2d_adjoint(x, p[f"{name}.w"], p[f"{name}.b"], g, need_params=grads is not None)
    if grads is not None:
        grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
    return dx


def resblock_backward(cache, g, p, name, grads):
    h, a1, c1, a2 = cache
    da2 = conv_backward(a2, g, p, f"{name}.b", grads)
    da1 = conv_backward(a1, silu_adjoint(c1, da2), p, f"{name}.a", grads)
    return g + silu_adjoint(h, da1)


def resblock_init(rng, p, name, c):
    p[f"{name}.a.w"], p[f"{name}.a.b"] = conv_init(rng, c, c, 3)
    p[f"{name}.b.w"], p[f"{name}.b.b"] = conv_init(rng, c, c, 3, gain=0.3)


# ---------------------------------------------------------------- attention block


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def attn_block(x, ctx, p, name, heads, mask):
    """x + W_o attn(W_q x, W_k ctx, W_v ctx). x: B x P x C, ctx: B x L x E, mask: B x P x L."""
    q = _split(x @ p[f"{name}.q"].T, heads)
    k = _split(ctx @ p[f"{name}.k"].T, heads)
    v = _split(ctx @ p[f"{name}.v"].T, heads)
    m = None if mask is None else mask[:, None]
    o, w = sdpa(q, k, v, m)
    om = _merge(o)
    y = x + om @ p[f"{name}.o"].T
    return y, w, (x, ctx, q, k, v, w, om)


def attn_block_backward(cache, g, p, name, heads, grads, g_weights=None, self_attn=False):
    """Returns (dx, dctx). For self-attention dctx is already folded into dx."""
    x, ctx, q, k, v, w, om = cache
    if grads is not None:
        grads[f"{name}.o"] = np.einsum("bpc,bpd->cd", g, om)
    do = _split(g @ p[f"{name}.o"], heads)
    dq, dk, dv = sdpa_adjoint(q, k, v, w, do, g_weights)
    dq, dk, dv = _merge(dq), _merge(dk), _merge(dv)
    if grads is not None:
        grads[f"{name}.q"] = np.einsum("bpd,bpc->dc", dq, x)
        grads[f"{name}.k"] = np.einsum("bld,ble->de", dk, ctx)
        grads[f"{name}.v"] = np.einsum("bld,ble->de", dv, ctx)
    dx = g + dq @ p[f"{name}.q"]
    dctx = dk @ p[f"{name}.k"] + dv @ p[f"{name}.v"]
    if self_attn:
        return dx + dctx, None
    return dx, dctx


def attn_init(rng, p, name, c_query, c_ctx, d):
    p[f"{name}.q"] = linear_init(rng, d, c_query)
    p[f"{name}.k"] = linear_init(rng, d, c_ctx)
    p[f"{name}.v"] = linear_init(rng, d, c_ctx)
    p[f"{name}.o"] = linear_init(rng, c_query, d, gain=0.3)


def to_tokens(a):
    b, c, h, w = a.shape
    return a.reshape(b, c, h * w).transpose(0, 2, 1)


def from_tokens(x, h, w):
    b, n, c = x.shape
    return x.transpose(0, 2, 1).reshape(b, c, h, w)


# ---------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, clip=1.0):
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, names):
        self.t += 1
        if self.clip:
            norm = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in names))
            scale = min(1.0, self.clip / (norm + 1e-12))
        else:
            scale = 1.0
        b1, b2 = self.betas
        for n in names:
            g = grads[n] * scale
            m = self.m.get(n, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(n, 0.0) * b2 + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            mh = m / (1 - b1 ** self.t)
            vh = v / (1 - b2 ** self.t)
            params[n] = params[n] - self.lr * mh / (np.sqrt(vh) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads, names):
        for n in names:
            params[n] = params[n] - self.lr * grads[n]
