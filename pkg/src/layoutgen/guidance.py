"""Region loss over per-instance attention maps and the latent gradient update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import aggregate_maps, aggregate_self_maps
from .layout import MaskSet

EPS = 1e-6


class GuidanceError(RuntimeError):
    pass


class PhaseError(ValueError):
    pass


@dataclass
class RegionLossReport:
    fg: np.ndarray
    bg: np.ndarray
    terms: np.ndarray
    total: float
    eps: float = EPS


@dataclass(frozen=True)
class GuidanceSchedule:
    lam_start: float = 8.0
    lam_end: float = 2.0
    guided_steps: int = 6
    layers: tuple = ("cross", "self")
    iters: int = 1

    def __post_init__(self):
        if not (self.lam_start >= self.lam_end > 0):
            raise ValueError("need lam_start >= lam_end > 0")
        if self.guided_steps < 0:
            raise ValueError("guided_steps must be >= 0")


def lambda_at(step: int, schedule: GuidanceSchedule) -> float:
    """Linear decay from lam_start (first guided step) to lam_end (last)."""
    G = schedule.guided_steps
    if not 0 <= step < G:
        raise PhaseError(f"step {step} outside the guided phase [0, {G})")
    if G == 1:
        return schedule.lam_start
    return schedule.lam_start + (schedule.lam_end - schedule.lam_start) * step / (G - 1)


def region_stats(attn_map: np.ndarray, fg_mask: np.ndarray, bg_mask: np.ndarray) -> tuple[float, float]:
    """Mean foreground activation and mean background leakage of one instance map."""
    fg = float((attn_map * fg_mask).sum() / (fg_mask.sum() + EPS))
    bg = float((attn_map * bg_mask).sum() / (bg_mask.sum() + EPS))
    return fg, bg


def region_loss(stats, n: int | None = None) -> RegionLossReport:
    """sum_i (1 - fg_i / (fg_i + N bg_i))^2 over (fg_i, bg_i) pairs."""
    stats = list(stats)
    n = len(stats) if n is None else n
    if n != len(stats):
        raise ValueError(f"N={n} but {len(stats)} instance stats given")
    if n == 0:
        z = np.zeros(0)
        return RegionLossReport(z, z, z, 0.0)
    fg = np.array([s[0] for s in stats], dtype=np.float64)
    bg = np.array([s[1] for s in stats], dtype=np.float64)
    denom = np.maximum(fg + n * bg, EPS)
    terms = (1.0 - fg / denom) ** 2
    return RegionLossReport(fg, bg, terms, float(terms.sum()))


def region_loss_grad(maps: np.ndarray, masks: MaskSet) -> tuple[RegionLossReport, np.ndarray]:
    """Loss for all instance maps (N x h x w) and its gradient with respect to the maps."""
    n = maps.shape[0]
    if n == 0:
        return region_loss([], 0), np.zeros_like(maps)
    fgm, bgm = masks.fg_masks, masks.bg_mask
    fg_norm = fgm.sum(axis=(1, 2)) + EPS
    bg_norm = bgm.sum() + EPS
    fg = (maps * fgm).sum(axis=(1, 2)) / fg_norm
    bg = (maps * bgm[None]).sum(axis=(1, 2)) / bg_norm
    raw = fg + n * bg
    floored = raw < EPS
    denom = np.where(floored, EPS, raw)
    r = fg / denom
    terms = (1.0 - r) ** 2
    dr = -2.0 * (1.0 - r)
    dr_dfg = np.where(floored, 1.0 / EPS, n * bg / denom ** 2)
    dr_dbg = np.where(floored, 0.0, -n * fg / denom ** 2)
    dfg, dbg = dr * dr_dfg, dr * dr_dbg
    dmaps = (dfg / fg_norm)[:, None, None] * fgm + (dbg / bg_norm)[:, None, None] * bgm[None]
    return RegionLossReport(fg, bg, terms, float(terms.sum())), dmaps


def _layer_losses(cache, cond, masksets, layers, heads):
    """Per-row loss averaged over layers, plus weight cotangents for backward."""
    w_self, w_cross = cache["w_self"], cache["w_cross"]
    ah, aw = cache["hw"]
    g_self = np.zeros_like(w_self) if "self" in layers else None
    g_cross = np.zeros_like(w_cross) if "cross" in layers else None
    scale = 1.0 / len(layers)
    total = 0.0
    reports = []
    for b, ms in enumerate(masksets):
        n = ms.fg_masks.shape[0]
        row = {}
        if n == 0:
            reports.append(row)
            continue
        if "cross" in layers:
            tm = cond.tokens[b]
            maps = aggregate_maps(w_cross[b], tm, ah, aw)
            rep, dmaps = region_loss_grad(maps, ms)
            sel = tm.selector(w_cross.shape[-1])
            g_cross[b] = scale / heads * (dmaps.reshape(n, -1).T @ sel)[None]
            total += scale * rep.total
            row["cross"] = rep
        if "self" in layers:
            maps = aggregate_self_maps(w_self[b], ms.fg_masks)
            rep, dmaps = region_loss_grad(maps, ms)
            g_self[b] = scale / heads * (dmaps.reshape(n, -1).T @ ms.fg_masks.reshape(n, -1))[None]
            total += scale * rep.total
            row["self"] = rep
        reports.append(row)
    return total, g_self, g_cross, reports


def region_objective(model, z, t, cond, masksets, layers=("cross", "self")) -> float:
    """Layer-averaged region loss summed over the batch (forward only)."""
    _, cache = model.forward(z, t, cond)
    return _layer_losses(cache, cond, masksets, layers, model.cfg.heads)[0]


def region_gradient(model, z, t, cond, masksets, layers=("cross", "self")):
    """(loss, d loss / d z, per-row reports)."""
    _, cache = model.forward(z, t, cond)
    total, g_self, g_cross, reports = _layer_losses(cache, cond, masksets, layers, model.cfg.heads)
    back = model.backward(cache, None, g_self, g_cross, param_grads=False)
    return total, back["z"], reports


def guidance_step(model, z, t, cond, masksets, lam: float, layers=("cross", "self")):
    """z - lam * grad_z L_reg. ``cond`` should carry unmasked attention."""
    if lam == 0 or all(ms.fg_masks.shape[0] == 0 for ms in masksets):
        return z, []
    total, grad, reports = region_gradient(model, z, t, cond, masksets, layers)
    if not np.all(np.isfinite(grad)) or not np.isfinite(total):
        bad = int((~np.isfinite(grad)).sum())
        raise GuidanceError(f"non-finite guidance gradient ({bad} entries), loss={total}")
    return z - lam * grad, reports
