"""Layout-adherence AP via an intensity-band oracle detector, and a Gaussian Frechet distance.

Both are desk-scale stand-ins: the detector is exact only for images whose
class intensities follow the palette, and the features are handcrafted, so
the numbers are meaningful only as relative comparisons between runs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .layout import Instance, obb_iou
from .synthdata import ClassPalette

THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


class EvalConfigError(ValueError):
    pass


class FrechetError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: Instance
    score: float


@dataclass(frozen=True)
class FrechetReport:
    mu_a: np.ndarray
    mu_b: np.ndarray
    sigma_a: np.ndarray
    sigma_b: np.ndarray
    distance: float


# ---------------------------------------------------------------- detector


def min_area_rect(points: np.ndarray) -> tuple[float, float, float, float, float]:
    """Rotating-calipers minimum-area rectangle (cx, cy, w, h, theta) of a 2-D point set."""
    pts = np.unique(points, axis=0)
    try:
        hull = pts[ConvexHull(pts).vertices]
    except Exception:
        hull = pts
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        if not np.any(e):
            continue
        theta = math.atan2(e[1], e[0])
        c, s = math.cos(theta), math.sin(theta)
        u = hull @ np.array([c, s])
        v = hull @ np.array([-s, c])
        area = (u.max() - u.min()) * (v.max() - v.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, theta, u.min(), u.max(), v.min(), v.max())
    _, theta, u0, u1, v0, v1 = best
    c, s = math.cos(theta), math.sin(theta)
    um, vm = (u0 + u1) / 2, (v0 + v1) / 2
    cx, cy = um * c - vm * s, um * s + vm * c
    w, h = u1 - u0, v1 - v0
    # fold theta into [-pi/2, pi/2)
    while theta >= math.pi / 2:
        theta -= math.pi
    while theta < -math.pi / 2:
        theta += math.pi
    return cx, cy, w, h, theta


def detect(image: np.ndarray, palette: ClassPalette, mode: str = "hbb", margin: float = 0.06,
           min_area: int = 4) -> list[Detection]:
    """Threshold each class band, take 8-connected components, fit a box per component."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    out = []
    structure = np.ones((3, 3), dtype=bool)
    for cid, spec in enumerate(palette.classes):
        lo, hi = spec.band
        binary = (img >= lo - margin) & (img <= hi + margin)
        labels, n = ndimage.label(binary, structure=structure)
        for k in range(1, n + 1):
            ys, xs = np.nonzero(labels == k)
            count = len(ys)
            if count < min_area:
                continue
            if mode == "hbb":
                x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
                box = Instance.hbb(cid, x0, y0, x1 - x0, y1 - y0)
            elif mode == "obb":
                corners = np.concatenate([np.stack([xs + dx, ys + dy], 1) for dx in (0, 1) for dy in (0, 1)])
                box = Instance.obb(cid, *min_area_rect(corners.astype(np.float64)))
            else:
                raise EvalConfigError(f"unknown box mode {mode!r}")
            out.append(Detection(cid, box, float(min(1.0, count / box.area))))
    return out


def count_mismatches(dets: list, layout) -> dict:
    """Classes whose detection count differs from the layout count: {class_id: (n_det, n_gt)}.

    Touching same-class instances merge into one component, so a mismatch marks
    scenes where the detector undercounts rather than the generator.
    """
    n_det, n_gt = {}, {}
    for d in dets:
        n_det[d.class_id] = n_det.get(d.class_id, 0) + 1
    for g in layout.instances:
        n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    return {c: (n_det.get(c, 0), n_gt.get(c, 0)) for c in sorted(set(n_det) | set(n_gt))
            if n_det.get(c, 0) != n_gt.get(c, 0)}


# ---------------------------------------------------------------- AP


def _envelope(inst: Instance) -> Instance:
    if not inst.oriented:
        return inst
    c = inst.corners()
    x0, y0 = c.min(axis=0)
    x1, y1 = c.max(axis=0)
    return Instance.hbb(inst.class_id, x0, y0, x1 - x0, y1 - y0)


def box_iou(a: Instance, b: Instance, mode: str = "hbb") -> float:
    if mode == "hbb":
        a, b = _envelope(a), _envelope(b)
    return obb_iou(a, b)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def match_detections(dets_per_scene, layouts, class_id: int, threshold: float, mode: str = "hbb"):
    """Greedy matching in descending score (ties: scene order, then detection order).

    Returns (tp flags in ranked order, number of ground-truth boxes).
    """
    ranked = []
    for s, dets in enumerate(dets_per_scene):
        for j, d in enumerate(dets):
            if d.class_id == class_id:
                ranked.append((-d.score, s, j, d))
    ranked.sort(key=lambda r: r[:3])
    gts = [[g for g in lay.instances if g.class_id == class_id] for lay in layouts]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = []
    for _, s, _, d in ranked:
        best, best_k = -1.0, -1
        for k, g in enumerate(gts[s]):
            if used[s][k]:
                continue
            iou = box_iou(d.box, g, mode)
            if iou > best:
                best, best_k = iou, k
        hit = best_k >= 0 and best >= threshold
        if hit:
            used[s][best_k] = True
        tp.append(hit)
    return np.array(tp, dtype=bool), sum(len(g) for g in gts)


def layout_score(dets_per_scene, layouts, thresholds=THRESHOLDS, mode: str = "hbb") -> dict:
    """Class-averaged AP at each IoU threshold; ``ap50`` and ``ap50_95`` summaries."""
    if len(dets_per_scene) != len(layouts):
        raise EvalConfigError(f"{len(dets_per_scene)} detection lists for {len(layouts)} layouts")
    for thr in thresholds:
        if not 0 < thr <= 1:
            raise EvalConfigError(f"IoU threshold {thr} outside (0, 1]")
    classes = sorted({g.class_id for lay in layouts for g in lay.instances})
    per = {}
    for thr in thresholds:
        aps = [average_precision(*match_detections(dets_per_scene, layouts, c, thr, mode)) for c in classes]
        per[float(thr)] = float(np.mean(aps)) if aps else 0.0
    out = {"per_threshold": per, "ap50_95": float(np.mean(list(per.values())))}
    out["ap50"] = per.get(0.5, float("nan"))
    return out


# ---------------------------------------------------------------- features / Frechet


GRAD_BINS = np.linspace(0.0, 0.5 * math.sqrt(2.0), 9)


def features(image: np.ndarray) -> np.ndarray:
    """4x4 grid cell means (16) followed by an 8-bin gradient-magnitude histogram (8)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    ye = np.linspace(0, h, 5).astype(int)
    xe = np.linspace(0, w, 5).astype(int)
    grid = [img[ye[i]:ye[i + 1], xe[j]:xe[j + 1]].mean() for i in range(4) for j in range(4)]
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    mag = np.clip(np.hypot(gx, gy), 0.0, GRAD_BINS[-1])
    hist, _ = np.histogram(mag, bins=GRAD_BINS)
    return np.concatenate([grid, hist / mag.size])


def _sym(m):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return 0.5 * (m + m.T)


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sa, sb = _sym(sigma_a), _sym(sigma_b)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape or sa.shape[0] != mu_a.shape[0]:
        raise EvalConfigError("mean/covariance dimensions disagree")
    try:
        root_a = _psd_sqrt(sa)
        cross = np.linalg.eigvalsh(_sym(root_a @ sb @ root_a))
    except np.linalg.LinAlgError as exc:
        raise FrechetError(f"eigendecomposition failed: {exc}") from exc
    tr_cross = float(np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2.0 * tr_cross)
    return max(d, 0.0)


def frechet_report(feats_a: np.ndarray, feats_b: np.ndarray) -> FrechetReport:
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    sa = np.cov(feats_a, rowvar=False) if len(feats_a) > 1 else np.zeros((feats_a.shape[1],) * 2)
    sb = np.cov(feats_b, rowvar=False) if len(feats_b) > 1 else np.zeros((feats_b.shape[1],) * 2)
    return FrechetReport(mu_a, mu_b, _sym(sa), _sym(sb), frechet(mu_a, sa, mu_b, sb))


def evaluate(generated, layouts, reference, palette: ClassPalette, mode: str = "hbb") -> dict:
    """JSON-ready report for generated images against layouts and reference images."""
    if len(generated) != len(layouts):
        raise EvalConfigError(f"{len(generated)} images for {len(layouts)} layouts")
    if len(generated) == 0:
        raise EvalConfigError("nothing to evaluate")
    dets = [detect(img, palette, mode) for img in generated]
    bad = [k for k, (d, lay) in enumerate(zip(dets, layouts)) if count_mismatches(d, lay)]
    if bad:
        warnings.warn(f"detection count differs from layout in {len(bad)} of {len(dets)} scenes "
                      f"(first: {bad[:5]})", stacklevel=2)
    score = layout_score(dets, layouts, mode=mode)
    fa = np.stack([features(x) for x in generated])
    fb = np.stack([features(x) for x in reference])
    return {"ap50": score["ap50"], "ap50_95": score["ap50_95"],
            "frechet": frechet_report(fa, fb).distance, "n_scenes": len(generated)}
