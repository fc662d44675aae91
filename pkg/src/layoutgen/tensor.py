"""Dense float64 array ops with hand-written adjoints.

Tensors are plain ``numpy.ndarray`` objects (float64). Every differentiable
op ``f`` has a companion ``f_adjoint`` that maps the op inputs plus an output
cotangent to the input cotangents. Callers compose adjoints in reverse call
order; there is no tape.

Spatial ops accept either a single ``C x H x W`` tensor or a batch
``B x C x H x W``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

NEG_INF = -np.inf
"""Additive mask sentinel. Softmax maps it to an exact zero weight."""


class DimensionError(ValueError):
    pass


class MaskedRowError(ValueError):
    """A softmax row had every entry masked."""


@dataclass(frozen=True)
class AdjointPair:
    forward: Callable
    adjoint: Callable


def asarray(x) -> np.ndarray:
    a = np.asarray(x)
    return a if a.dtype in (np.float32, np.float64) else a.astype(np.float64)


# ---------------------------------------------------------------- matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = asarray(a), asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def matmul_adjoint(a, b, g):
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


# ---------------------------------------------------------------- softmax


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; ``-inf`` entries get weight exactly 0."""
    x = asarray(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    m = x.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise MaskedRowError("softmax row is fully masked")
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_adjoint(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Cotangent of the softmax input, given its output ``y``."""
    return y * (g - (y * g).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- conv2d


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C x H x W or B x C x H x W, got {x.shape}")


def _im2col(xb: np.ndarray, k: int) -> np.ndarray:
    """(C*k*k) x (B*H*W) patch matrix of a same-padded batch."""
    B, C, H, W = xb.shape
    p = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((C, k, k, B, H, W), dtype=xb.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + H, j:j + W].transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * H * W)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    B, C, H, W = shape
    p = k // 2
    cols = cols.reshape(C, k, k, B, H, W)
    xp = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + H, j:j + W] += cols[:, i, j]
    return xp[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation with bias; kernel size 1 or 3."""
    xb, single = _as_batch(x)
    cout, cin, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise DimensionError(f"conv2d: unsupported kernel {w.shape}")
    if xb.shape[1] != cin:
        raise DimensionError(f"conv2d: input has {xb.shape[1]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    B, _, H, W = xb.shape
    if k == 1:
        out = np.matmul(w[:, :, 0, 0], xb.reshape(B, cin, H * W)).reshape(B, cout, H, W)
    else:
        out = (w.reshape(cout, -1) @ _im2col(xb, k)).reshape(cout, B, H, W).transpose(1, 0, 2, 3)
    out = out + b[None, :, None, None]
    return out[0] if single else out


def conv2d_adjoint(x, w, b, g, need_params=True):
    """Returns (dx, dw, db); dw and db are None when ``need_params`` is False."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(g)
    cout, cin, k, _ = w.shape
    B, _, H, W = xb.shape
    dw = db = None
    if k == 1:
        w2 = w[:, :, 0, 0]
        g3 = gb.reshape(B, cout, H * W)
        dx = np.matmul(w2.T, g3).reshape(B, cin, H, W)
        if need_params:
            dw = np.einsum("bcp,bop->oc", xb.reshape(B, cin, H * W), g3, optimize=True)[:, :, None, None]
    else:
        g2 = gb.transpose(1, 0, 2, 3).reshape(cout, B * H * W)
        dx = _col2im(w.reshape(cout, -1).T @ g2, xb.shape, k)
        if need_params:
            dw = (g2 @ _im2col(xb, k).T).reshape(w.shape)
    if need_params:
        db = gb.sum(axis=(0, 2, 3))
    return (dx[0] if single else dx), dw, db


# ---------------------------------------------------------------- resizing


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    r = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        r[:, 0] = 1.0
        return r
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    r[np.arange(n_out), lo] = 1.0 - frac
    r[np.arange(n_out), lo + 1] += frac
    return r


def resize_bilinear(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Corner-aligned bilinear resize over the last two axes."""
    if h < 1 or w < 1:
        raise DimensionError(f"resize target {h}x{w} must be positive")
    x = asarray(x)
    if x.ndim < 2:
        raise DimensionError("resize needs at least two axes")
    if x.shape[-2:] == (h, w):
        return x.copy()
    ry = _interp_matrix(h, x.shape[-2])
    rx = _interp_matrix(w, x.shape[-1])
    return ry @ x @ rx.T


def resize_bilinear_adjoint(x, h, w, g):
    ry = _interp_matrix(h, x.shape[-2])
    rx = _interp_matrix(w, x.shape[-1])
    return ry.T @ g @ rx


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling over the last two axes (both even)."""
    *lead, hh, ww = x.shape
    if hh % 2 or ww % 2:
        raise DimensionError(f"avgpool2 needs even spatial dims, got {hh}x{ww}")
    return x.reshape(*lead, hh // 2, 2, ww // 2, 2).mean(axis=(-3, -1))


def avgpool2_adjoint(g: np.ndarray) -> np.ndarray:
    return upsample2(g) * 0.25


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def upsample2_adjoint(g: np.ndarray) -> np.ndarray:
    *lead, hh, ww = g.shape
    return g.reshape(*lead, hh // 2, 2, ww // 2, 2).sum(axis=(-3, -1))


# ---------------------------------------------------------------- pointwise


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_adjoint(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    s = expit(x)
    return g * s * (1.0 + x * (1.0 - s))


ADJOINTS: dict[str, AdjointPair] = {
    "matmul": AdjointPair(matmul, matmul_adjoint),
    "softmax_lastdim": AdjointPair(softmax_lastdim, lambda x, g: softmax_adjoint(softmax_lastdim(x), g)),
    "conv2d": AdjointPair(conv2d, conv2d_adjoint),
    "resize_bilinear": AdjointPair(resize_bilinear, resize_bilinear_adjoint),
    "avgpool2": AdjointPair(avgpool2, lambda x, g: avgpool2_adjoint(g)),
    "upsample2": AdjointPair(upsample2, lambda x, g: upsample2_adjoint(g)),
    "silu": AdjointPair(silu, silu_adjoint),
}
