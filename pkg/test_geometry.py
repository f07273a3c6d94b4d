import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import InputError
from core.geometry import BoundingBox, area, boxes_to_array, ioa, ioa_matrix, iou, iou_matrix


def box(*coords):
    return BoundingBox(*map(float, coords))


@st.composite
def boxes(draw, max_coord=100.0):
    x1 = draw(st.floats(0.0, max_coord, allow_nan=False))
    y1 = draw(st.floats(0.0, max_coord, allow_nan=False))
    w = draw(st.floats(0.5, 50.0, allow_nan=False))
    h = draw(st.floats(0.5, 50.0, allow_nan=False))
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def pixel_iou(a, b, size=12):
    """Count unit cells covered by integer boxes."""
    grid = np.arange(size)
    def mask(bb):
        xs = (grid >= bb.x1) & (grid < bb.x2)
        ys = (grid >= bb.y1) & (grid < bb.y2)
        return ys[:, None] & xs[None, :]
    ma, mb = mask(a), mask(b)
    return (ma & mb).sum() / (ma | mb).sum()


class TestArea:
    @pytest.mark.parametrize(
        "coords,expected",
        [((0, 0, 2, 2), 4.0), ((0, 0, 1, 3), 3.0), ((1.5, 2.5, 4.0, 3.5), 2.5)],
    )
    def test_area(self, coords, expected):
        assert area(box(*coords)) == expected


class TestBoundingBox:
    @pytest.mark.parametrize(
        "coords",
        [(0, 0, 0, 2), (0, 0, 2, 0), (2, 0, 1, 2), (0, float("nan"), 1, 1), (0, 0, float("inf"), 1)],
    )
    def test_rejects_degenerate_or_non_finite(self, coords):
        with pytest.raises(InputError):
            box(*coords)

    def test_from_sequence_needs_four_values(self):
        with pytest.raises(InputError):
            BoundingBox.from_sequence([0, 0, 1])

    def test_width_height_and_list(self):
        b = box(1, 2, 4, 8)
        assert (b.width, b.height) == (3.0, 6.0)
        assert b.to_list() == [1.0, 2.0, 4.0, 8.0]


class TestIoU:
    def test_identity(self):
        assert iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 1, 1), box(5, 5, 6, 6)) == 0.0

    def test_touching_edges_do_not_overlap(self):
        assert iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0

    def test_half_shift(self):
        assert iou(box(0, 0, 2, 2), box(1, 0, 3, 2)) == 1 / 3

    @pytest.mark.parametrize(
        "a,b",
        [
            ((0, 0, 2, 2), (1, 0, 3, 2)),
            ((0, 0, 5, 7), (2, 3, 9, 10)),
            ((1, 1, 4, 4), (2, 2, 3, 3)),
            ((0, 0, 3, 3), (4, 4, 6, 6)),
            ((0, 0, 11, 2), (3, 1, 6, 11)),
        ],
    )
    def test_matches_pixel_counting(self, a, b):
        assert iou(box(*a), box(*b)) == pytest.approx(pixel_iou(box(*a), box(*b)), abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(boxes())
    def test_self_overlap_is_one(self, a):
        assert iou(a, a) == pytest.approx(1.0)


class TestIoA:
    def test_contained(self):
        assert ioa(box(2, 2, 3, 3), box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert ioa(box(0, 0, 1, 1), box(5, 5, 6, 6)) == 0.0

    def test_half_inside(self):
        assert ioa(box(0, 0, 2, 2), box(1, 0, 3, 2)) == 0.5

    def test_not_symmetric(self):
        small, big = box(0, 0, 1, 1), box(0, 0, 4, 4)
        assert ioa(small, big) == 1.0
        assert ioa(big, small) == 1 / 16


class TestMatrices:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
    def test_iou_matrix_equals_scalar_bit_for_bit(self, left, right):
        m = iou_matrix(boxes_to_array(left), boxes_to_array(right))
        assert m.shape == (len(left), len(right))
        for i, a in enumerate(left):
            for j, b in enumerate(right):
                assert m[i, j] == iou(a, b)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
    def test_ioa_matrix_equals_scalar(self, dets, regions):
        m = ioa_matrix(boxes_to_array(dets), boxes_to_array(regions))
        for i, a in enumerate(dets):
            for j, b in enumerate(regions):
                assert math.isclose(m[i, j], ioa(a, b), rel_tol=0, abs_tol=1e-15)

    def test_empty_inputs(self):
        empty = boxes_to_array([])
        assert empty.shape == (0, 4)
        assert iou_matrix(empty, boxes_to_array([box(0, 0, 1, 1)])).shape == (0, 1)
        assert ioa_matrix(boxes_to_array([box(0, 0, 1, 1)]), empty).shape == (1, 0)
