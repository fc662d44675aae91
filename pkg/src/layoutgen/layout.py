"""Box geometry, mask rasterization and oriented IoU."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BACKGROUND = -1


@dataclass(frozen=True)
class Instance:
    """One layout box.

    ``box`` is ``(x, y, w, h)`` (top-left origin) when ``oriented`` is False,
    otherwise ``(cx, cy, w, h, theta)`` with theta in radians.
    """

    class_id: int
    box: tuple
    oriented: bool = False

    def __post_init__(self):
        n = 5 if self.oriented else 4
        if len(self.box) != n:
            raise ValueError(f"expected {n} box values, got {self.box}")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        w, h = self.box[2], self.box[3]
        if not (w > 0 and h > 0):
            raise ValueError(f"box sides must be positive: {self.box}")
        if self.oriented and not (-math.pi <= self.box[4] < math.pi):
            raise ValueError(f"theta {self.box[4]} outside [-pi, pi)")

    @classmethod
    def hbb(cls, class_id, x, y, w, h):
        return cls(int(class_id), (x, y, w, h), False)

    @classmethod
    def obb(cls, class_id, cx, cy, w, h, theta):
        return cls(int(class_id), (cx, cy, w, h, theta), True)

    @property
    def center_form(self) -> tuple[float, float, float, float, float]:
        """(cx, cy, w, h, theta) regardless of geometry kind."""
        if self.oriented:
            return self.box
        x, y, w, h = self.box
        return (x + w / 2, y + h / 2, w, h, 0.0)

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]

    @property
    def aspect_ratio(self) -> float:
        return self.box[2] / self.box[3]

    def corners(self) -> np.ndarray:
        """4 x 2 corner array, counter-clockwise in a y-up frame."""
        cx, cy, w, h, t = self.center_form
        c, s = math.cos(t), math.sin(t)
        local = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([cx, cy])

    def scaled(self, s: float) -> "Instance":
        if self.oriented:
            cx, cy, w, h, t = self.box
            return Instance.obb(self.class_id, cx * s, cy * s, w * s, h * s, t)
        return Instance.hbb(self.class_id, *(v * s for v in self.box))

    def to_json(self, class_names: Sequence[str] | None = None) -> dict:
        cls = class_names[self.class_id] if class_names else self.class_id
        key = "obb" if self.oriented else "hbb"
        return {"class": cls, key: list(self.box)}


@dataclass(frozen=True)
class Layout:
    canvas_w: int
    canvas_h: int
    instances: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))

    def __len__(self):
        return len(self.instances)

    @property
    def class_ids(self) -> list[int]:
        return [inst.class_id for inst in self.instances]

    def to_json(self, class_names: Sequence[str] | None = None) -> dict:
        return {"canvas": [self.canvas_w, self.canvas_h],
                "instances": [i.to_json(class_names) for i in self.instances]}

    @classmethod
    def from_json(cls, obj: dict, class_names: Sequence[str] | None = None) -> "Layout":
        w, h = obj["canvas"]
        out = []
        for item in obj.get("instances", []):
            c = item["class"]
            if isinstance(c, str):
                if class_names is None or c not in class_names:
                    raise ValueError(f"unknown class name {c!r}")
                c = list(class_names).index(c)
            if "obb" in item:
                out.append(Instance.obb(c, *item["obb"]))
            elif "hbb" in item:
                out.append(Instance.hbb(c, *item["hbb"]))
            else:
                raise ValueError(f"instance without geometry: {item}")
        return cls(int(w), int(h), tuple(out))

    def save(self, path, class_names=None):
        Path(path).write_text(json.dumps(self.to_json(class_names), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, class_names=None) -> "Layout":
        return cls.from_json(json.loads(Path(path).read_text()), class_names)


@dataclass(frozen=True)
class MaskSet:
    fg_masks: np.ndarray  # N x H x W, {0, 1}
    bg_mask: np.ndarray   # H x W, {0, 1}
    label_map: np.ndarray  # H x W, instance index or BACKGROUND

    @property
    def union(self) -> np.ndarray:
        return 1.0 - self.bg_mask


def _inside(inst: Instance, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    cx, cy, w, h, t = inst.center_form
    dx, dy = px - cx, py - cy
    if inst.oriented:
        c, s = math.cos(t), math.sin(t)
        u = c * dx + s * dy
        v = -s * dx + c * dy
    else:
        u, v = dx, dy
    # half-open so adjacent boxes on integer edges never share a pixel
    return (u >= -w / 2) & (u < w / 2) & (v >= -h / 2) & (v < h / 2)


def rasterize(layout: Layout, h: int, w: int) -> MaskSet:
    """Pixel-center masks at resolution ``h x w``.

    Overlapping pixels are labeled with the smallest-area covering instance
    (ties go to the lower index).
    """
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be positive, got {h}x{w}")
    ys = (np.arange(h) + 0.5) * layout.canvas_h / h
    xs = (np.arange(w) + 0.5) * layout.canvas_w / w
    px, py = np.meshgrid(xs, ys)
    n = len(layout)
    fg = np.zeros((n, h, w))
    label = np.full((h, w), BACKGROUND, dtype=np.int64)
    best = np.full((h, w), np.inf)
    for i, inst in enumerate(layout.instances):
        m = _inside(inst, px, py)
        fg[i] = m
        take = m & (inst.area < best)
        label[take] = i
        best[take] = inst.area
    bg = 1.0 - (fg.max(axis=0) if n else np.zeros((h, w)))
    return MaskSet(fg, bg, label)


# ---------------------------------------------------------------- polygons


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive when counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    m = len(clip)
    for k in range(m):
        if not out:
            break
        a, b = clip[k], clip[(k + 1) % m]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        def cross(p, q):
            sp, sq = side(p), side(q)
            r = sp / (sp - sq)
            return (p[0] + r * (q[0] - p[0]), p[1] + r * (q[1] - p[1]))

        src, out = out, []
        for i, cur in enumerate(src):
            prev = src[i - 1]
            cin, pin = side(cur) >= 0, side(prev) >= 0
            if cin:
                if not pin:
                    out.append(cross(prev, cur))
                out.append(cur)
            elif pin:
                out.append(cross(prev, cur))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _ccw(poly):
    return poly if polygon_area(poly) >= 0 else poly[::-1]


def obb_iou(a: Instance, b: Instance) -> float:
    pa, pb = _ccw(a.corners()), _ccw(b.corners())
    area_a, area_b = abs(polygon_area(pa)), abs(polygon_area(pb))
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = abs(polygon_area(clip_polygon(pa, pb)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))
