"""Procedural scenes with class-coded intensity bands, plus a gradient edge extractor.

Each class owns a disjoint intensity band, so a thresholding detector is an
exact oracle for where instances were drawn.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .layout import Instance, Layout, _inside, rasterize

BACKGROUND_BAND = (0.0, 0.12)


@dataclass(frozen=True)
class ClassSpec:
    name: str
    shape: str  # rectangle | ellipse | triangle
    band: tuple
    size_range: tuple = (6, 14)


@dataclass(frozen=True)
class ClassPalette:
    classes: tuple
    background_band: tuple = BACKGROUND_BAND

    def __post_init__(self):
        bands = sorted([tuple(c.band) for c in self.classes] + [tuple(self.background_band)])
        for (lo1, hi1), (lo2, hi2) in zip(bands, bands[1:]):
            if hi1 >= lo2:
                raise ValueError(f"intensity bands overlap: {bands}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def __len__(self):
        return len(self.classes)

    def to_json(self) -> dict:
        return {"background_band": list(self.background_band),
                "classes": [{"name": c.name, "shape": c.shape, "band": list(c.band),
                             "size_range": list(c.size_range)} for c in self.classes]}

    @classmethod
    def from_json(cls, obj) -> "ClassPalette":
        return cls(tuple(ClassSpec(c["name"], c["shape"], tuple(c["band"]), tuple(c["size_range"]))
                         for c in obj["classes"]), tuple(obj["background_band"]))


DEFAULT_PALETTE = ClassPalette((
    ClassSpec("building", "rectangle", (0.30, 0.42)),
    ClassSpec("storagetank", "ellipse", (0.55, 0.67)),
    ClassSpec("airplane", "triangle", (0.80, 0.92)),
))


@dataclass
class SceneSample:
    image: np.ndarray  # 1 x H x W
    layout: Layout
    edge: np.ndarray   # H x W
    seed: int


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple = (32, 32)  # (W, H)
    n_range: tuple = (1, 4)
    oriented: bool = False
    noise_std: float = 0.01
    edge_threshold: float = 0.2
    palette: ClassPalette = field(default=DEFAULT_PALETTE)


def _shape_mask(inst: Instance, shape: str, px, py) -> np.ndarray:
    inside = _inside(inst, px, py)
    if shape == "rectangle":
        return inside
    cx, cy, w, h, t = inst.center_form
    c, s = math.cos(t), math.sin(t)
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if shape == "ellipse":
        return inside & ((u / (w / 2)) ** 2 + (v / (h / 2)) ** 2 <= 1.0)
    if shape == "triangle":
        # apex truncated to one pixel so the top row is never empty
        half = np.maximum(1.0, (w / 2) * (v + h / 2) / h)
        return inside & (np.abs(u) <= half)
    raise ValueError(f"unknown shape family {shape!r}")


def _place(rng, cfg: SceneConfig, spec: ClassSpec):
    W, H = cfg.canvas
    lo, hi = spec.size_range
    if cfg.oriented:
        w = rng.uniform(lo, hi)
        h = rng.uniform(lo, hi)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        r = 0.5 * math.hypot(w, h)
        if 2 * r + 2 >= min(W, H):
            return None
        cx = rng.uniform(r + 1, W - r - 1)
        cy = rng.uniform(r + 1, H - r - 1)
        return (cx, cy, w, h, theta)
    hi_w, hi_h = min(hi, W - 2), min(hi, H - 2)
    w = int(rng.integers(lo, hi_w + 1))
    h = int(rng.integers(lo, hi_h + 1))
    x = int(rng.integers(1, W - w))
    y = int(rng.integers(1, H - h))
    return (x, y, w, h)


def _dilate(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= out[:, :-1].copy()
    out[:, :-1] |= out[:, 1:].copy()
    return out


def gen_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SceneSample:
    W, H = cfg.canvas
    lo_n, hi_n = cfg.n_range
    if not (0 <= lo_n <= hi_n <= 8):
        raise ValueError(f"n_range must lie in [0, 8], got {cfg.n_range}")
    if W < 16 or H < 16:
        raise ValueError("canvas must be at least 16x16")
    rng = np.random.default_rng(seed)
    pal = cfg.palette
    blo, bhi = pal.background_band
    level = rng.uniform(blo + 0.25 * (bhi - blo), blo + 0.75 * (bhi - blo))
    img = np.clip(level + cfg.noise_std * rng.standard_normal((H, W)), blo, bhi)

    ys = np.arange(H) + 0.5
    xs = np.arange(W) + 0.5
    px, py = np.meshgrid(xs, ys)
    occupied = np.zeros((H, W), dtype=bool)
    instances = []
    n = int(rng.integers(lo_n, hi_n + 1))
    for _ in range(n):
        for _attempt in range(50):
            cid = int(rng.integers(len(pal)))
            spec = pal.classes[cid]
            box = _place(rng, cfg, spec)
            if box is None:
                continue
            inst = Instance(cid, box, cfg.oriented)
            box_mask = _inside(inst, px, py)
            if not box_mask.any() or (box_mask & _dilate(occupied)).any():
                continue
            shape = _shape_mask(inst, spec.shape, px, py)
            lo, hi = spec.band
            val = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo))
            tex = np.clip(val + cfg.noise_std * rng.standard_normal((H, W)), lo, hi)
            img = np.where(shape, tex, img)
            occupied |= box_mask
            instances.append(inst)
            break
    layout = Layout(W, H, tuple(instances))
    image = img[None]
    return SceneSample(image, layout, gen_edge(image[0], cfg.edge_threshold), seed)


def gen_edge(image: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    """Central-difference gradient magnitude, max-normalized, weak responses zeroed."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(mag)
    mag = mag / peak
    return np.where(mag >= threshold, mag, 0.0)


# ---------------------------------------------------------------- image files


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_gray(path, x: np.ndarray):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[0]
    Image.fromarray(to_uint8(x), mode="L").save(path, format="PNG")


def load_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def box_edges(edge: np.ndarray, layout: Layout) -> np.ndarray:
    """``edge`` with everything outside the layout boxes zeroed, the form composites take.

    The central-difference kernel spreads each object boundary one pixel past
    its box; an edge model trained on raw maps learns that halo.
    """
    edge = np.asarray(edge, dtype=np.float64)
    return edge * rasterize(layout, *edge.shape[-2:]).union


def crop_instance(edge: np.ndarray, inst: Instance) -> np.ndarray:
    """Box-aligned patch of ``edge`` (rotated back to upright for OBBs)."""
    if not inst.oriented:
        x, y, w, h = (int(round(v)) for v in inst.box)
        return edge[y:y + h, x:x + w].copy()
    cx, cy, w, h, t = inst.box
    pw, ph = max(1, int(round(w))), max(1, int(round(h)))
    u = (np.arange(pw) + 0.5) * w / pw - w / 2
    v = (np.arange(ph) + 0.5) * h / ph - h / 2
    uu, vv = np.meshgrid(u, v)
    c, s = math.cos(t), math.sin(t)
    sx = cx + c * uu - s * vv - 0.5
    sy = cy + s * uu + c * vv - 0.5
    from .edgedb import sample_bilinear
    return sample_bilinear(edge, sx, sy)


def gen_dataset(n: int, seed: int, out_dir, cfg: SceneConfig = SceneConfig()) -> Path:
    """Write ``n`` scenes plus an edge-crop database; returns the manifest path."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    for sub in ("scenes", "edges", "layouts", "crops"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    names = cfg.palette.names
    lines = []
    rid = 0
    for k in range(n):
        s = gen_scene(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), cfg)
        stem = f"{k:04d}"
        save_gray(out / "scenes" / f"{stem}.png", s.image)
        save_gray(out / "edges" / f"{stem}.png", s.edge)
        s.layout.save(out / "layouts" / f"{stem}.json", names)
        for i, inst in enumerate(s.layout.instances):
            rel = f"crops/{stem}_{i}.png"
            save_gray(out / rel, crop_instance(s.edge, inst))
            lines.append(json.dumps({"id": rid, "class": names[inst.class_id],
                                     "aspect_ratio": inst.aspect_ratio, "file": rel}, sort_keys=True))
            rid += 1
    (out / "palette.json").write_text(json.dumps(cfg.palette.to_json(), sort_keys=True, indent=1) + "\n")
    manifest = out / "index.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def load_dataset(root, palette: ClassPalette | None = None):
    """(images N x 1 x H x W, edges N x H x W or None, layouts, stems) from a generated directory."""
    root = Path(root)
    if palette is None:
        palette = ClassPalette.from_json(json.loads((root / "palette.json").read_text()))
    stems = sorted(p.stem for p in (root / "layouts").glob("*.json"))
    images = np.stack([load_gray(root / "scenes" / f"{s}.png") for s in stems])[:, None]
    edges = None
    if (root / "edges").is_dir():
        edges = np.stack([load_gray(root / "edges" / f"{s}.png") for s in stems])
    layouts = [Layout.load(root / "layouts" / f"{s}.json", palette.names) for s in stems]
    return images, edges, layouts, stems
