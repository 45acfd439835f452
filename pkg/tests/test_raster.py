"""Tests for masks, polygon rasterization, dilation, RLE and pixel counting."""

import numpy as np
import pytest

from src.errors import DegeneratePolygonError, MalformedRleError, ShapeMismatchError
from src.raster import (
    BBox, BinaryMask, Polygon, RleMask, dilate, mask_from_bbox, pixel_counts, rasterize_polygon,
    rasterize_polygons, rle_decode, rle_encode, translate_mask,
)


def inside_even_odd(vertices, px, py) -> bool:
    """Plain crossing-number test for one point."""
    inside = False
    n = len(vertices)
    for k in range(n):
        x0, y0 = vertices[k]
        x1, y1 = vertices[(k + 1) % n]
        if (y0 <= py < y1) or (y1 <= py < y0):
            xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if px < xi:
                inside = not inside
    return inside


def brute_rasterize(vertices, width, height) -> np.ndarray:
    out = np.zeros((height, width), dtype=np.uint8)
    for i in range(height):
        for j in range(width):
            out[i, j] = inside_even_odd(vertices, j + 0.5, i + 0.5)
    return out


def brute_dilate(arr: np.ndarray, radius: int) -> np.ndarray:
    """OR of the mask shifted by every offset within Chebyshev distance ``radius``."""
    h, w = arr.shape
    out = np.zeros_like(arr)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = np.zeros_like(arr)
            shifted[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)] = \
                arr[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            out |= shifted
    return out


# --- BinaryMask ---


class TestBinaryMask:
    """Masks validate their values and compare by content."""

    def test_rejects_values_other_than_zero_and_one(self):
        """A 2 in the data is rejected."""
        with pytest.raises(ShapeMismatchError):
            BinaryMask([[0, 2]])

    def test_rejects_empty_shape(self):
        """Zero-width masks are not valid."""
        with pytest.raises(ShapeMismatchError):
            BinaryMask(np.zeros((3, 0)))

    def test_equality_is_by_value(self):
        """Two masks with the same pixels are equal and hash alike."""
        a = BinaryMask([[0, 1], [1, 0]])
        b = BinaryMask(np.array([[0, 1], [1, 0]], dtype=np.int64))
        assert a == b
        assert hash(a) == hash(b)

    def test_data_is_read_only(self):
        """The backing array cannot be mutated in place."""
        m = BinaryMask.zeros(3, 2)
        with pytest.raises(ValueError):
            m.data[0, 0] = 1

    def test_from_flat_checks_length(self):
        """Flat data must hold width x height values."""
        with pytest.raises(ShapeMismatchError):
            BinaryMask.from_flat(2, 2, [0, 1, 0])


# --- Rasterization ---


class TestRasterizePolygon:
    """Pixel-centre even-odd fill."""

    def test_rectangle_fills_twelve_pixels(self):
        """Rectangle (0,0)-(4,3) in 8x8 -> a 4x3 block at the origin."""
        m = rasterize_polygon(Polygon(((0, 0), (4, 0), (4, 3), (0, 3))), 8, 8)
        assert m.area == 12
        assert m.data[:3, :4].all()

    def test_triangle_sets_single_pixel(self):
        """Triangle (0,0),(2,0),(0,2) in 4x4 -> only pixel (0,0)."""
        m = rasterize_polygon(Polygon(((0, 0), (2, 0), (0, 2))), 4, 4)
        assert m.area == 1
        assert m.data[0, 0] == 1

    def test_polygon_outside_image_is_empty(self):
        """A polygon past the right edge leaves the mask empty."""
        m = rasterize_polygon(Polygon(((20, 0), (30, 0), (30, 5))), 8, 8)
        assert m.area == 0

    def test_fewer_than_three_vertices_is_degenerate(self):
        """Two vertices cannot form a polygon."""
        with pytest.raises(DegeneratePolygonError):
            Polygon(((0, 0), (1, 1)))

    def test_negative_vertex_is_degenerate(self):
        """Vertices must be non-negative."""
        with pytest.raises(DegeneratePolygonError):
            Polygon(((0, 0), (-1, 1), (2, 2)))

    def test_integer_rectangles_fill_w_times_h(self, rng):
        """Axis-aligned integer rectangles inside the image have exactly w*h pixels."""
        for _ in range(50):
            w, h = int(rng.integers(1, 10)), int(rng.integers(1, 10))
            x, y = int(rng.integers(0, 20 - w)), int(rng.integers(0, 20 - h))
            box = BBox(x, y, w, h)
            assert rasterize_polygon(Polygon.from_bbox(box), 20, 20).area == w * h

    def test_matches_brute_force_on_random_polygons(self, rng):
        """Vectorised fill equals the per-pixel crossing test on random (self-intersecting) polygons."""
        for _ in range(40):
            n = int(rng.integers(3, 8))
            verts = tuple((float(rng.uniform(0, 20)), float(rng.uniform(0, 14))) for _ in range(n))
            got = rasterize_polygon(Polygon(verts), 16, 12)
            assert np.array_equal(got.data, brute_rasterize(verts, 16, 12))

    def test_multiple_rings_are_ored(self):
        """Two disjoint rings give the union of their pixels."""
        a = Polygon.from_bbox(BBox(0, 0, 2, 2))
        b = Polygon.from_bbox(BBox(4, 4, 2, 2))
        assert rasterize_polygons([a, b], 8, 8).area == 8


# --- Dilation ---


class TestDilate:
    """Square structuring element, zero padding at the border."""

    def test_single_pixel_radius_one(self):
        """Pixel (3,3) in 7x7 grows to a 3x3 block."""
        arr = np.zeros((7, 7), dtype=np.uint8)
        arr[3, 3] = 1
        out = dilate(BinaryMask(arr), 1)
        assert out.area == 9
        assert out.data[2:5, 2:5].all()

    def test_radius_zero_is_identity(self, rng):
        """Radius 0 returns the same mask."""
        m = BinaryMask(rng.integers(0, 2, size=(9, 11)))
        assert dilate(m, 0) == m

    def test_all_ones_is_fixed_point(self):
        """A full mask stays full."""
        m = BinaryMask(np.ones((5, 6), dtype=np.uint8))
        assert dilate(m, 3) == m

    def test_negative_radius_rejected(self):
        """Radii are non-negative integers."""
        with pytest.raises(ValueError):
            dilate(BinaryMask.zeros(3, 3), -1)

    def test_matches_brute_force(self, rng):
        """scipy-backed dilation equals the shifted-OR definition."""
        for _ in range(30):
            arr = (rng.random((16, 20)) < 0.05).astype(np.uint8)
            r = int(rng.integers(0, 4))
            assert np.array_equal(dilate(BinaryMask(arr), r).data, brute_dilate(arr, r))

    # --- AC-6: dilation structure ---

    def test_extensive_and_semigroup(self, rng):
        """m is inside dilate(m, r) and dilate(dilate(m, a), b) == dilate(m, a + b)."""
        for _ in range(100):
            m = BinaryMask((rng.random((24, 24)) < 0.03).astype(np.uint8))
            a, b = int(rng.integers(0, 4)), int(rng.integers(0, 4))
            grown = dilate(m, a)
            assert not np.any(m.as_bool() & ~grown.as_bool())
            assert dilate(grown, b) == dilate(m, a + b)

    def test_huge_radius_fills_image(self):
        """Any nonempty mask covers the image at radius >= max(w, h)."""
        arr = np.zeros((5, 9), dtype=np.uint8)
        arr[4, 0] = 1
        assert dilate(BinaryMask(arr), 9).area == 45
        assert dilate(BinaryMask(arr), 50).area == 45


# --- RLE ---


class TestRle:
    """Column-major run lengths with a leading zero run."""

    def test_top_left_pixel(self):
        """2x2 with only (0,0) set -> [0, 1, 3]."""
        rle = rle_encode(BinaryMask([[1, 0], [0, 0]]))
        assert rle.counts == (0, 1, 3)
        assert (rle.height, rle.width) == (2, 2)

    def test_all_zero(self):
        """3x3 zeros -> [9]."""
        assert rle_encode(BinaryMask.zeros(3, 3)).counts == (9,)

    def test_column_major_order(self):
        """Second pixel in traversal is (row 1, col 0)."""
        rle = rle_encode(BinaryMask([[0, 0], [1, 0]]))
        assert rle.counts == (1, 1, 2)

    # --- AC-7: RLE round trip ---

    def test_round_trip_random_masks(self, rng):
        """decode(encode(m)) == m on 1000 random 64x64 masks."""
        for k in range(1000):
            density = (k % 10) / 9
            m = BinaryMask((rng.random((64, 64)) < density).astype(np.uint8))
            assert rle_decode(rle_encode(m)) == m

    def test_decode_rejects_wrong_total(self):
        """Counts must sum to h*w."""
        with pytest.raises(MalformedRleError):
            rle_decode(RleMask(2, 2, (1, 1)))

    def test_decode_rejects_negative_counts(self):
        """Negative runs are malformed."""
        with pytest.raises(MalformedRleError):
            rle_decode(RleMask(1, 2, (3, -1)))

    def test_from_dict_requires_size(self):
        """A dict without size is malformed."""
        with pytest.raises(MalformedRleError):
            RleMask.from_dict({"counts": [1]})


# --- Boxes ---


class TestBoxMasks:
    """Box masks, clipping and translation."""

    def test_box_mask_twelve_pixels(self):
        """Box (0,0,4,3) in 8x8 -> 12 pixels."""
        assert mask_from_bbox(BBox(0, 0, 4, 3), 8, 8).area == 12

    def test_box_outside_is_empty(self):
        """A box past the border sets nothing."""
        assert mask_from_bbox(BBox(10, 10, 4, 3), 8, 8).area == 0

    def test_box_covering_image_is_full(self):
        """A box larger than the image sets everything."""
        assert mask_from_bbox(BBox(-1, -1, 20, 20), 8, 6).area == 48

    def test_box_mask_matches_centre_oracle(self, rng):
        """Fractional boxes select exactly the pixels whose centres lie inside."""
        for _ in range(50):
            x, y = float(rng.uniform(-2, 8)), float(rng.uniform(-2, 8))
            box = BBox(x, y, float(rng.uniform(0.2, 6)), float(rng.uniform(0.2, 6)))
            expected = np.zeros((8, 8), dtype=np.uint8)
            for i in range(8):
                for j in range(8):
                    expected[i, j] = box.x <= j + 0.5 < box.x2 and box.y <= i + 0.5 < box.y2
            assert np.array_equal(mask_from_bbox(box, 8, 8).data, expected)

    def test_clip_returns_none_outside(self):
        """Nothing left after clipping -> None."""
        assert BBox(10, 0, 2, 2).clip(8, 8) is None
        assert BBox(6, -1, 4, 4).clip(8, 8) == BBox(6, 0, 2, 3)

    def test_bbox_needs_positive_size(self):
        """Zero-width boxes are invalid."""
        with pytest.raises(ValueError):
            BBox(0, 0, 0, 1)

    def test_translate_drops_pixels_past_border(self):
        """Shifting right by 2 pushes the last columns out."""
        m = BinaryMask(np.ones((2, 4), dtype=np.uint8))
        out = translate_mask(m, 2, 0)
        assert out.area == 4
        assert out.data[:, :2].sum() == 0


# --- Pixel counts ---


class TestPixelCounts:
    """Confusion counts with exact integer identities."""

    def test_shifted_block(self):
        """4x4 block vs the same block shifted right 2 -> intersection 8, union 24."""
        a = np.zeros((8, 8), dtype=np.uint8)
        a[0:4, 0:4] = 1
        b = np.zeros((8, 8), dtype=np.uint8)
        b[0:4, 2:6] = 1
        c = pixel_counts(BinaryMask(a), BinaryMask(b))
        assert (c.intersection, c.union) == (8, 24)

    def test_disjoint(self):
        """Disjoint masks -> union is the sum of the areas."""
        a = BinaryMask([[1, 0, 0]])
        b = BinaryMask([[0, 1, 1]])
        c = pixel_counts(a, b)
        assert (c.intersection, c.union) == (0, 3)

    def test_shape_mismatch(self):
        """Different dimensions raise."""
        with pytest.raises(ShapeMismatchError):
            pixel_counts(BinaryMask.zeros(2, 2), BinaryMask.zeros(3, 2))

    def test_union_identity_random(self, rng):
        """union == pred + gt - intersection, all <= w*h."""
        for _ in range(100):
            a = BinaryMask(rng.integers(0, 2, size=(10, 7)))
            b = BinaryMask(rng.integers(0, 2, size=(10, 7)))
            c = pixel_counts(a, b)
            assert c.union == c.pred_area + c.gt_area - c.intersection
            assert c.union <= 70
