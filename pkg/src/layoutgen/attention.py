"""Masked scaled dot-product attention and per-instance attention maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layout import BACKGROUND
from .tensor import NEG_INF, DimensionError, MaskedRowError, softmax_adjoint, softmax_lastdim


class MaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TokenMap:
    """Token positions in a prompt: shared prefix plus one index set per instance."""

    shared_prefix: tuple
    per_instance: tuple  # tuple of tuples, K_i for instance i

    def __post_init__(self):
        object.__setattr__(self, "shared_prefix", tuple(int(k) for k in self.shared_prefix))
        object.__setattr__(self, "per_instance", tuple(tuple(int(k) for k in ks) for ks in self.per_instance))
        seen = set(self.shared_prefix)
        for ks in self.per_instance:
            if seen & set(ks):
                raise MaskConfigError(f"token sets overlap: {self}")
            seen |= set(ks)

    @property
    def num_instances(self) -> int:
        return len(self.per_instance)

    def selector(self, num_tokens: int) -> np.ndarray:
        """N x L indicator of K_i."""
        s = np.zeros((self.num_instances, num_tokens))
        for i, ks in enumerate(self.per_instance):
            s[i, list(ks)] = 1.0
        return s


def sdpa(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None):
    """softmax(q k^T / sqrt(d) + mask) v. Leading axes are batch/head axes.

    Returns ``(output, weights)``. Masked pairs get weight exactly 0.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise DimensionError(f"query dim {d} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("keys and values disagree on count")
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(d)
    if mask is not None:
        if mask.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(f"mask {mask.shape} does not match scores {scores.shape}")
        scores = scores + mask.astype(scores.dtype, copy=False)
    weights = softmax_lastdim(scores)
    return np.matmul(weights, v), weights


def sdpa_adjoint(q, k, v, weights, g_out, g_weights=None):
    """Cotangents (dq, dk, dv). ``g_weights`` adds a direct cotangent on the weights."""
    gw = np.matmul(g_out, np.swapaxes(v, -1, -2))
    if g_weights is not None:
        gw = gw + g_weights
    dv = np.matmul(np.swapaxes(weights, -1, -2), g_out)
    gs = softmax_adjoint(weights, gw) / math.sqrt(q.shape[-1])
    dq = np.matmul(gs, k)
    dk = np.matmul(np.swapaxes(gs, -1, -2), q)
    return dq, dk, dv


def build_self_mask(label_map: np.ndarray) -> np.ndarray:
    """Position pair (p, q) open iff both carry the same label (background included)."""
    lab = np.asarray(label_map).reshape(-1)
    return np.where(lab[:, None] == lab[None, :], 0.0, NEG_INF)


def build_cross_mask(label_map: np.ndarray, tokens: TokenMap, num_tokens: int) -> np.ndarray:
    """Instance pixels see their own tokens plus the prefix; background sees the prefix only.

    Token positions outside every set (padding) are blocked for all queries.
    """
    lab = np.asarray(label_map).reshape(-1)
    if not tokens.shared_prefix:
        raise MaskConfigError("shared prefix is empty; background rows would be fully masked")
    n = tokens.num_instances
    allowed = np.zeros((n + 1, num_tokens), dtype=bool)  # last row: background
    allowed[:, list(tokens.shared_prefix)] = True
    for i, ks in enumerate(tokens.per_instance):
        if not ks:
            raise MaskConfigError(f"instance {i} has no class tokens")
        allowed[i, list(ks)] = True
    if lab.size and lab.max() >= n:
        raise MaskConfigError("label map refers to an instance without tokens")
    rows = allowed[np.where(lab == BACKGROUND, n, lab)]
    return np.where(rows, 0.0, NEG_INF)


def open_cross_mask(tokens: TokenMap, num_positions: int, num_tokens: int) -> np.ndarray:
    """Unrestricted cross-attention: every position sees every real token, never padding."""
    used = list(tokens.shared_prefix) + [k for ks in tokens.per_instance for k in ks]
    row = np.full(num_tokens, NEG_INF)
    row[used] = 0.0
    return np.broadcast_to(row, (num_positions, num_tokens)).copy()


def aggregate_maps(weights: np.ndarray, tokens: TokenMap, h: int, w: int) -> np.ndarray:
    """A_i[p] = mean_heads sum_{k in K_i} weights[head, p, k]; returns N x h x w."""
    heads, hw, L = weights.shape
    if hw != h * w:
        raise DimensionError(f"{hw} positions cannot be reshaped to {h}x{w}")
    sel = tokens.selector(L)
    maps = weights.mean(axis=0) @ sel.T  # hw x N
    return maps.T.reshape(-1, h, w)


def aggregate_self_maps(weights: np.ndarray, fg_masks: np.ndarray) -> np.ndarray:
    """Self-attention analogue: attention mass each query sends into instance i's box."""
    heads, hw, hw2 = weights.shape
    n, h, w = fg_masks.shape
    if hw != h * w or hw2 != hw:
        raise DimensionError("self-attention weights do not match the mask resolution")
    maps = weights.mean(axis=0) @ fg_masks.reshape(n, -1).T
    return maps.T.reshape(n, h, w)


__all__ = [
    "TokenMap", "MaskConfigError", "MaskedRowError", "sdpa", "sdpa_adjoint",
    "build_self_mask", "build_cross_mask", "open_cross_mask",
    "aggregate_maps", "aggregate_self_maps",
]
