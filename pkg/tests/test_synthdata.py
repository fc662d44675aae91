import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layoutgen.layout import rasterize
from layoutgen.synthdata import (DEFAULT_PALETTE, ClassPalette, ClassSpec, SceneConfig, box_edges, crop_instance, gen_dataset,
                                 gen_edge, gen_scene, load_dataset, load_gray, save_gray)


def test_determinism():
    a, b = gen_scene(7), gen_scene(7)
    assert np.array_equal(a.image, b.image) and a.layout == b.layout and np.array_equal(a.edge, b.edge)
    assert not np.array_equal(gen_scene(8).image, a.image)


def test_empty_scene():
    s = gen_scene(0, SceneConfig(n_range=(0, 0)))
    assert len(s.layout) == 0
    lo, hi = DEFAULT_PALETTE.background_band
    assert s.image.min() >= lo and s.image.max() <= hi


def test_bad_configs():
    with pytest.raises(ValueError):
        gen_scene(0, SceneConfig(n_range=(3, 1)))
    with pytest.raises(ValueError):
        gen_scene(0, SceneConfig(canvas=(8, 8)))
    with pytest.raises(ValueError):
        ClassPalette((ClassSpec("a", "rectangle", (0.1, 0.3)),))


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.booleans())
def test_class_pixels_inside_boxes(seed, oriented):
    s = gen_scene(seed, SceneConfig(oriented=oriented))
    m = rasterize(s.layout, 32, 32)
    img = s.image[0]
    bg_lo, bg_hi = DEFAULT_PALETTE.background_band
    outside = img[m.bg_mask.astype(bool)]
    assert ((outside >= bg_lo) & (outside <= bg_hi)).all()
    for inst, fg in zip(s.layout.instances, m.fg_masks):
        lo, hi = DEFAULT_PALETTE.classes[inst.class_id].band
        vals = img[fg.astype(bool)]
        assert ((vals >= lo) & (vals <= hi)).any()
        assert (((vals >= lo) & (vals <= hi)) | (vals <= bg_hi)).all()
    # boxes never touch, so connected regions map one to one onto instances
    assert (m.fg_masks.sum(0) <= 1).all()


def test_gen_edge_cases():
    assert not gen_edge(np.full((8, 8), 0.4)).any()
    step = np.zeros((8, 8))
    step[:, 4:] = 1.0
    e = gen_edge(step)
    assert e.max() == 1.0
    assert set(np.nonzero(e)[1]) == {3, 4}
    assert (e[e > 0] >= 0.2).all()


def test_png_roundtrip_quantized(tmp_path, rng):
    x = rng.random((5, 7))
    save_gray(tmp_path / "a.png", x)
    assert np.abs(load_gray(tmp_path / "a.png") - x).max() <= 0.5 / 255 + 1e-12


def test_crop_sizes():
    s = gen_scene(3, SceneConfig(n_range=(2, 2)))
    for inst in s.layout.instances:
        c = crop_instance(s.edge, inst)
        assert c.shape == (int(round(inst.box[3])), int(round(inst.box[2])))
    s = gen_scene(3, SceneConfig(n_range=(2, 2), oriented=True))
    for inst in s.layout.instances:
        c = crop_instance(s.edge, inst)
        assert abs(c.shape[1] / c.shape[0] - inst.aspect_ratio) < 0.25 * inst.aspect_ratio


def test_dataset_files(tmp_path):
    manifest = gen_dataset(4, 11, tmp_path)
    images, edges, layouts, stems = load_dataset(tmp_path)
    assert images.shape == (4, 1, 32, 32) and edges.shape == (4, 32, 32) and stems == ["0000", "0001", "0002",
                                                                                          "0003"]
    recs = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(recs) == sum(len(l) for l in layouts)
    assert [r["id"] for r in recs] == list(range(len(recs)))
    for r in recs:
        assert (tmp_path / r["file"]).exists() and math.isfinite(r["aspect_ratio"])
    with pytest.raises(ValueError):
        gen_dataset(0, 1, tmp_path / "x")


@settings(max_examples=20)
@given(st.integers(0, 10 ** 6))
def test_box_edges_keeps_in_box_mass_only(seed):
    s = gen_scene(seed)
    union = rasterize(s.layout, 32, 32).union
    boxed = box_edges(s.edge, s.layout)
    assert not boxed[union == 0].any()
    assert np.array_equal(boxed[union == 1], s.edge[union == 1])


def test_raw_edges_spill_past_boxes():
    # the central-difference kernel straddles each boundary, so raw maps have mass outside
    s = gen_scene(0)
    assert s.edge[rasterize(s.layout, 32, 32).union == 0].sum() > 0
