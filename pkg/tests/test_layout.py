import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _oracles import hbb_iou, mc_iou
from layoutgen.layout import BACKGROUND, Instance, Layout, obb_iou, rasterize


def test_instance_validation():
    with pytest.raises(ValueError):
        Instance.hbb(0, 0, 0, 0, 3)
    with pytest.raises(ValueError):
        Instance.obb(0, 1, 1, 2, 2, 4.0)
    with pytest.raises(ValueError):
        Instance(0, (1, 2, 3), False)


def test_full_canvas_box():
    m = rasterize(Layout(8, 8, [Instance.hbb(0, 0, 0, 8, 8)]), 8, 8)
    assert m.fg_masks[0].all() and not m.bg_mask.any()


def test_empty_layout():
    m = rasterize(Layout(8, 8), 4, 4)
    assert m.bg_mask.all() and m.fg_masks.shape == (0, 4, 4)
    assert (m.label_map == BACKGROUND).all()


def test_nested_boxes_label_inner():
    lay = Layout(16, 16, [Instance.hbb(0, 0, 0, 16, 16), Instance.hbb(1, 4, 4, 4, 4)])
    m = rasterize(lay, 16, 16)
    assert (m.label_map[4:8, 4:8] == 1).all()
    assert m.label_map[0, 0] == 0
    # both masks still cover the overlap; ownership is only for the label map
    assert m.fg_masks[0, 5, 5] == 1 and m.fg_masks[1, 5, 5] == 1


def test_box_outside_canvas_is_empty():
    m = rasterize(Layout(8, 8, [Instance.hbb(0, 20, 20, 3, 3)]), 8, 8)
    assert not m.fg_masks.any() and m.bg_mask.all()


def test_half_open_pixel_centers():
    # box [2, 5) x [1, 3): pixel centres 2.5, 3.5, 4.5 by 1.5, 2.5
    m = rasterize(Layout(8, 8, [Instance.hbb(0, 2, 1, 3, 2)]), 8, 8)
    ys, xs = np.nonzero(m.fg_masks[0])
    assert set(xs) == {2, 3, 4} and set(ys) == {1, 2}


def test_rasterize_downscaled_resolution():
    m = rasterize(Layout(32, 32, [Instance.hbb(0, 0, 0, 16, 32)]), 16, 16)
    assert m.fg_masks[0][:, :8].all() and not m.fg_masks[0][:, 8:].any()


@given(st.lists(st.tuples(st.integers(0, 2), st.floats(0, 28), st.floats(0, 28), st.floats(1, 12),
                          st.floats(1, 12)), max_size=5))
def test_mask_partition(boxes):
    lay = Layout(32, 32, [Instance.hbb(*b) for b in boxes])
    m = rasterize(lay, 16, 16)
    assert np.array_equal(m.union + m.bg_mask, np.ones((16, 16)))
    assert np.array_equal(m.label_map == BACKGROUND, m.bg_mask.astype(bool))


def test_layout_json_roundtrip(tmp_path):
    lay = Layout(32, 32, [Instance.hbb(1, 1, 2, 3, 4), Instance.obb(0, 10, 10, 4, 2, 0.3)])
    names = ["a", "b"]
    lay.save(tmp_path / "l.json", names)
    assert Layout.load(tmp_path / "l.json", names) == lay
    with pytest.raises(ValueError):
        Layout.from_json({"canvas": [8, 8], "instances": [{"class": "zzz", "hbb": [0, 0, 1, 1]}]}, names)


def test_iou_identity_and_disjoint():
    a = Instance.obb(0, 5, 5, 4, 2, 0.4)
    assert obb_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert obb_iou(Instance.hbb(0, 0, 0, 2, 2), Instance.hbb(0, 5, 5, 2, 2)) == 0.0


def test_iou_rotated_square():
    a = Instance.obb(0, 0, 0, 1, 1, 0.0)
    b = Instance.obb(0, 0, 0, 1, 1, math.pi / 4)
    inter = 2 * (math.sqrt(2) - 1)
    expect = inter / (2 - inter)
    assert obb_iou(a, b) == pytest.approx(expect, abs=1e-12)
    assert obb_iou(a, b) == pytest.approx(0.7071, abs=1e-3)


def test_iou_hbb_closed_form(rng):
    for _ in range(50):
        a = tuple(rng.uniform([0, 0, 1, 1], [10, 10, 6, 6]))
        b = tuple(rng.uniform([0, 0, 1, 1], [10, 10, 6, 6]))
        assert obb_iou(Instance.hbb(0, *a), Instance.hbb(0, *b)) == pytest.approx(hbb_iou(a, b), abs=1e-12)


def test_iou_monte_carlo_spot(rng):
    for seed in range(3):
        r = np.random.default_rng(seed)
        a = Instance.obb(0, *r.uniform([0, 0, 1, 1], [4, 4, 5, 5]), r.uniform(-math.pi, math.pi))
        b = Instance.obb(0, *r.uniform([0, 0, 1, 1], [4, 4, 5, 5]), r.uniform(-math.pi, math.pi))
        assert abs(obb_iou(a, b) - mc_iou(a, b, 2 * 10 ** 5, seed)) < 5e-3


_obb = st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0.5, 6), st.floats(0.5, 6), st.floats(-3.1, 3.1))


@given(_obb, _obb)
def test_iou_symmetric_and_bounded(va, vb):
    a, b = Instance.obb(0, *va), Instance.obb(0, *vb)
    ab, ba = obb_iou(a, b), obb_iou(b, a)
    assert 0.0 <= ab <= 1.0 + 1e-12
    assert abs(ab - ba) < 1e-9
