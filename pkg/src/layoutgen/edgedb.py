"""Reference edge store indexed by class and log aspect ratio, plus composite assembly."""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .layout import Layout, _inside
from .tensor import resize_bilinear

MANIFEST = "index.jsonl"


class EdgeDBError(ValueError):
    pass


class RetrievalError(KeyError):
    pass


@dataclass(frozen=True)
class EdgeRecord:
    id: int
    class_name: str
    aspect_ratio: float
    edge: np.ndarray = field(repr=False, compare=False)


@dataclass
class EdgeIndex:
    by_class: dict = field(default_factory=dict)  # name -> sorted [(log_ar, id)]
    records: dict = field(default_factory=dict)   # id -> EdgeRecord

    def __len__(self):
        return len(self.records)

    def add(self, rec: EdgeRecord):
        if rec.id in self.records:
            raise EdgeDBError(f"duplicate record id {rec.id}")
        if not rec.aspect_ratio > 0:
            raise EdgeDBError(f"record {rec.id}: aspect ratio must be positive")
        self.records[rec.id] = rec
        bisect.insort(self.by_class.setdefault(rec.class_name, []), (math.log(rec.aspect_ratio), rec.id))


def build_index(root_dir) -> EdgeIndex:
    from .synthdata import load_gray

    root = Path(root_dir)
    index = EdgeIndex()
    manifest = root / MANIFEST
    if not manifest.exists():
        return index
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rid, cls, ar, rel = int(obj["id"]), str(obj["class"]), float(obj["aspect_ratio"]), obj["file"]
        except (ValueError, KeyError, TypeError) as exc:
            raise EdgeDBError(f"{manifest}:{lineno}: unparsable manifest line ({exc})") from exc
        path = root / rel
        if not path.exists():
            raise EdgeDBError(f"{manifest}:{lineno}: missing edge file {rel}")
        index.add(EdgeRecord(rid, cls, ar, np.clip(load_gray(path), 0.0, 1.0)))
    return index


def retrieve_topk(index: EdgeIndex, class_name, aspect_ratio: float, k: int = 1) -> list[EdgeRecord]:
    """The ``k`` records of a class nearest in |log AR|, ties to lower id."""
    entries = index.by_class.get(str(class_name))
    if not entries:
        raise RetrievalError(f"class {class_name!r} not in edge index")
    q = math.log(aspect_ratio)
    ranked = sorted(entries, key=lambda e: (abs(q - e[0]), e[1]))
    return [index.records[rid] for _, rid in ranked[:k]]


def retrieve(index: EdgeIndex, class_name, aspect_ratio: float) -> EdgeRecord:
    return retrieve_topk(index, class_name, aspect_ratio, 1)[0]


def sample_bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional pixel indices; out-of-range taps read 0."""
    h, w = img.shape
    pad = np.pad(img, 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0

    def tap(yy, xx):
        ok = (yy >= -1) & (yy <= h) & (xx >= -1) & (xx <= w)
        return np.where(ok, pad[np.clip(yy + 1, 0, h + 1), np.clip(xx + 1, 0, w + 1)], 0.0)

    return ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
            + fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)))


def paste_instance(canvas: np.ndarray, patch: np.ndarray, inst, canvas_w: int, canvas_h: int):
    """Max-composite ``patch`` (already box-sized) into the instance's box."""
    h, w = canvas.shape
    ys = (np.arange(h) + 0.5) * canvas_h / h
    xs = (np.arange(w) + 0.5) * canvas_w / w
    px, py = np.meshgrid(xs, ys)
    inside = _inside(inst, px, py)
    if not inside.any():
        return canvas
    cx, cy, bw, bh, t = inst.center_form
    c, s = math.cos(t), math.sin(t)
    dx, dy = px[inside] - cx, py[inside] - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    ph, pw = patch.shape
    su = (u + bw / 2) * pw / bw - 0.5
    sv = (v + bh / 2) * ph / bh - 0.5
    vals = sample_bilinear(patch, su, sv)
    out = canvas.copy()
    out[inside] = np.maximum(out[inside], vals)
    return out


def compose(layout: Layout, index: EdgeIndex, class_names: Sequence[str] | None = None,
            resolution: tuple | None = None) -> np.ndarray:
    """Composite edge canvas (H x W) from the best-matching record per instance."""
    h, w = resolution or (layout.canvas_h, layout.canvas_w)
    canvas = np.zeros((h, w))
    sx, sy = w / layout.canvas_w, h / layout.canvas_h
    for i, inst in enumerate(layout.instances):
        name = class_names[inst.class_id] if class_names else str(inst.class_id)
        try:
            rec = retrieve(index, name, inst.aspect_ratio)
        except RetrievalError as exc:
            raise RetrievalError(f"instance {i}: {exc.args[0]}") from exc
        bw, bh = inst.box[2] * sx, inst.box[3] * sy
        patch = resize_bilinear(rec.edge, max(1, int(round(bh))), max(1, int(round(bw))))
        canvas = paste_instance(canvas, np.clip(patch, 0.0, 1.0), inst, layout.canvas_w, layout.canvas_h)
    return canvas
