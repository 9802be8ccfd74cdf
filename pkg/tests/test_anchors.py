import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdpose.anchors import (BoxGeom, LayerSpec, center_to_corners, corners_to_center, decode_offsets,
                             encode_offsets, generate_default_boxes, iou, iou_matrix, linear_scales,
                             make_layer_specs)
from helpers import iou_scalar


def test_single_box():
    s = generate_default_boxes([LayerSpec(1, 1, 0.5, (1.0,))])
    assert s.boxes.tolist() == [[0.5, 0.5, 0.5, 0.5]]


def test_two_by_two_three_ratios():
    s = generate_default_boxes([LayerSpec(2, 2, 0.4)])
    assert len(s) == 12
    wide = s.boxes[s.ratio_index == 1]
    assert np.all(wide[:, 2] / wide[:, 3] == pytest.approx(2.0, rel=1e-15))


def test_default_config_count():
    s = generate_default_boxes(make_layer_specs([8, 4]))
    assert len(s) == 240


def test_ordering_layer_row_col_ratio():
    s = generate_default_boxes([LayerSpec(2, 3, 0.3), LayerSpec(1, 1, 0.6)])
    keys = list(zip(s.layer, s.row, s.col, s.ratio_index))
    assert keys == sorted(keys)
    assert s.boxes[3 * 4 + 1][:2].tolist() == pytest.approx([(1 + 0.5) / 3, (1 + 0.5) / 2])


def test_generate_rejects_bad_specs():
    with pytest.raises(ValueError):
        generate_default_boxes([])
    with pytest.raises(ValueError):
        generate_default_boxes([LayerSpec(0, 2, 0.3)])
    with pytest.raises(ValueError):
        generate_default_boxes([LayerSpec(2, 2, 1.5)])
    with pytest.raises(ValueError):
        generate_default_boxes([LayerSpec(2, 2, 0.3, (1.0, -2.0))])


def test_linear_scales_and_extra_box():
    assert linear_scales(3, 0.2, 0.9) == pytest.approx([0.2, 0.55, 0.9])
    specs = make_layer_specs([8, 4], s_min=0.2, s_max=0.9, extra_box=True)
    assert specs[0].extra_scale == pytest.approx(math.sqrt(0.2 * 0.9))
    assert len(generate_default_boxes(specs)) == 64 * 4 + 16 * 4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6), st.floats(0.05, 1.0),
                          st.lists(st.floats(0.2, 5.0), min_size=1, max_size=4)), min_size=1, max_size=4))
def test_box_count_formula_and_purity(raw):
    specs = [LayerSpec(h, w, s, tuple(r)) for h, w, s, r in raw]
    a, b = generate_default_boxes(specs), generate_default_boxes(specs)
    assert len(a) == sum(h * w * len(r) for h, w, _, r in raw)
    assert a.boxes.tobytes() == b.boxes.tobytes()


def test_iou_examples():
    a = BoxGeom(0.5, 0.5, 1.0, 1.0)
    assert iou(a, a) == 1.0
    assert iou(a, BoxGeom(3.0, 3.0, 1.0, 1.0)) == 0.0
    assert iou(a, BoxGeom(1.0, 0.5, 1.0, 1.0)) == pytest.approx(1 / 3, abs=1e-15)


def test_boxgeom_rejects_degenerate():
    with pytest.raises(ValueError):
        BoxGeom(0.5, 0.5, 0.0, 0.1)


box = st.builds(lambda x, y, w, h: BoxGeom(x, y, w, h), st.floats(0, 1), st.floats(0, 1),
                st.floats(0.01, 1), st.floats(0.01, 1))


@settings(max_examples=200, deadline=None)
@given(box, box)
def test_iou_symmetric_bounded_and_matches_oracle(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_scalar(a.corners, b.corners), abs=1e-12)
    m = iou_matrix(np.array([a.corners]), np.array([b.corners]))
    assert m[0, 0] == pytest.approx(v, abs=1e-12)


def test_corner_center_round_trip():
    c = np.random.default_rng(0).uniform(size=(20, 4))
    c[:, 2:] += c[:, :2]
    np.testing.assert_allclose(center_to_corners(corners_to_center(c)), c, atol=1e-15)


def test_encode_examples():
    d = BoxGeom(0.4, 0.5, 0.2, 0.3)
    assert encode_offsets(d, d).tolist() == [0.0, 0.0, 0.0, 0.0]
    g = BoxGeom(0.4, 0.5, 0.2 * math.e, 0.3)
    assert encode_offsets(g, d) == pytest.approx([0.0, 0.0, 1.0, 0.0], abs=1e-15)
    with pytest.raises(ValueError):
        encode_offsets(np.array([0.5, 0.5, 0.0, 0.2]), d)


def test_decode_examples():
    d = BoxGeom(0.4, 0.5, 0.2, 0.3)
    assert decode_offsets(np.zeros(4), d) == d
    big = decode_offsets(np.array([0.0, 0.0, 50.0, 50.0]), d)
    assert big.corners == (0.0, 0.0, 1.0, 1.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.1), st.floats(0.01, 0.1),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.02, 2.0), st.floats(0.02, 2.0))
def test_round_trips(gx, gy, gw, gh, dx, dy, dw, dh):
    g = np.array([gx, gy, gw, gh])
    d = np.array([dx, dy, dw, dh])
    np.testing.assert_allclose(decode_offsets(encode_offsets(g, d), d), g, atol=1e-9)
    t = encode_offsets(g, d)
    np.testing.assert_allclose(encode_offsets(decode_offsets(t, d, clamp=False), d), t, atol=1e-9)
