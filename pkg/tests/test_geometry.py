import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmmot.geometry import (
    BBox, ImageSize, NormBox, denorm_array, from_norm, giou, iou, iou_matrix, norm_array, to_norm,
)

coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 300, allow_nan=False)
boxes = st.builds(BBox, coord, coord, size, size)


def test_iou_examples():
    assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0
    assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 1, 1)) == 0.0
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)


def test_giou_examples():
    assert giou(BBox(3, 4, 5, 6), BBox(3, 4, 5, 6)) == pytest.approx(1.0)
    assert giou(BBox(0, 0, 1, 1), BBox(2, 2, 1, 1)) == pytest.approx(-7 / 9, abs=1e-12)
    assert giou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-12)


def test_norm_examples():
    assert to_norm(BBox(0, 0, 10, 10), ImageSize(100, 100)) == pytest.approx(NormBox(0.05, 0.05, 0.1, 0.1))
    assert to_norm(BBox(50, 50, 100, 100), ImageSize(100, 200)) == pytest.approx(NormBox(1.0, 0.5, 1.0, 0.5))


def test_checked_rejects_degenerate():
    with pytest.raises(ValueError):
        BBox.checked(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BBox.checked(0, 0, 1, -2)
    with pytest.raises(ValueError):
        BBox.checked(math.nan, 0, 1, 1)
    with pytest.raises(ValueError):
        ImageSize.checked(0, 10)


@given(boxes, boxes)
def test_iou_giou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    g = giou(a, b)
    assert -1.0 < g <= v + 1e-12
    assert iou(a, a) == pytest.approx(1.0)


@given(boxes, boxes, coord, coord)
def test_translation_invariance(a, b, dx, dy):
    a2 = BBox(a.x + dx, a.y + dy, a.w, a.h)
    b2 = BBox(b.x + dx, b.y + dy, b.w, b.h)
    assert iou(a2, b2) == pytest.approx(iou(a, b), abs=1e-9)
    assert giou(a2, b2) == pytest.approx(giou(a, b), abs=1e-9)


@given(boxes, st.integers(1, 4000), st.integers(1, 4000))
def test_norm_round_trip(b, w, h):
    img = ImageSize(w, h)
    back = from_norm(to_norm(b, img), img)
    for u, v in zip(back, b):
        assert u == pytest.approx(v, rel=1e-9, abs=1e-9)
    arr = denorm_array(norm_array([tuple(b)], img), img)[0]
    np.testing.assert_allclose(arr, tuple(b), rtol=1e-9, atol=1e-9)


def test_giou_equals_iou_when_enclosure_is_union():
    a, b = BBox(0, 0, 2, 2), BBox(0, 0, 2, 1)
    assert giou(a, b) == pytest.approx(iou(a, b))


def test_iou_matrix_matches_scalar(rng):
    a = np.c_[rng.uniform(0, 50, (5, 2)), rng.uniform(1, 30, (5, 2))]
    b = np.c_[rng.uniform(0, 50, (4, 2)), rng.uniform(1, 30, (4, 2))]
    m = iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(BBox(*a[i]), BBox(*b[j])), abs=1e-12)
    assert iou_matrix(np.zeros((0, 4)), b).shape == (0, 4)
