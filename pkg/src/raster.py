# src/raster.py

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegeneratePolygonError, MalformedRleError, ShapeMismatchError

logger = logging.getLogger(__name__)


# --- Types ---

class BinaryMask:
    """Immutable row-major binary raster, one byte per pixel.

    ``data`` is a read-only (height, width) uint8 array holding only 0 and 1.
    Equality is value equality over dimensions and pixels.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ShapeMismatchError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
        if arr.dtype != np.bool_ and np.any((arr != 0) & (arr != 1)):
            raise ShapeMismatchError("mask values must be 0 or 1")
        self._data = _freeze(arr.astype(np.uint8))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "BinaryMask":
        # Trusted internal constructor: arr is already 0/1.
        mask = cls.__new__(cls)
        mask._data = _freeze(arr.astype(np.uint8, copy=True))
        return mask

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls._wrap(np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def from_flat(cls, width: int, height: int, values: Sequence[int]) -> "BinaryMask":
        if len(values) != width * height:
            raise ShapeMismatchError(f"expected {width * height} values, got {len(values)}")
        return cls(np.asarray(values, dtype=np.int64).reshape(height, width))

    @property
    def width(self) -> int:
        return int(self._data.shape[1])

    @property
    def height(self) -> int:
        return int(self._data.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self._data))

    def as_bool(self) -> np.ndarray:
        return self._data.astype(bool)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self) -> int:
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, area={self.area})"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RleMask:
    """Uncompressed COCO-style RLE: alternating 0/1 run lengths, column-major, leading zero run."""
    height: int
    width: int
    counts: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, data: dict) -> "RleMask":
        try:
            height, width = (int(v) for v in data["size"])
            counts = tuple(int(c) for c in data["counts"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRleError(f"RLE must have 'size' [h, w] and integer 'counts': {e}")
        return cls(height=height, width=width, counts=counts)


@dataclass(frozen=True)
class BBox:
    """Continuous x-y-width-height box in pixel coordinates."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"bbox coordinates must be finite: {values}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox must have positive width and height: {values}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"bbox needs 4 values [x, y, w, h], got {len(values)}")
        x, y, w, h = (float(v) for v in values)
        return cls(x, y, w, h)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def clip(self, width: int, height: int) -> "BBox | None":
        """Clip to the image rectangle; None when nothing remains."""
        x1, y1 = max(self.x, 0.0), max(self.y, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if x2 <= x1 or y2 <= y1:
            return None
        return BBox(x1, y1, x2 - x1, y2 - y1)

    def expand(self, pixels: float) -> "BBox":
        if pixels == 0:
            return self
        return BBox(self.x - pixels, self.y - pixels, self.w + 2 * pixels, self.h + 2 * pixels)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegeneratePolygonError(f"polygon needs at least 3 vertices, got {len(self.vertices)}")
        for x, y in self.vertices:
            if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
                raise DegeneratePolygonError(f"polygon vertex ({x}, {y}) must be finite and non-negative")

    @classmethod
    def from_flat(cls, coords: Sequence[float]) -> "Polygon":
        """Build from a COCO flat list [x1, y1, x2, y2, ...]."""
        if len(coords) % 2:
            raise DegeneratePolygonError(f"flat polygon has odd coordinate count {len(coords)}")
        pts = tuple((float(coords[i]), float(coords[i + 1])) for i in range(0, len(coords), 2))
        return cls(pts)

    @classmethod
    def from_bbox(cls, box: BBox) -> "Polygon":
        return cls(((box.x, box.y), (box.x2, box.y), (box.x2, box.y2), (box.x, box.y2)))

    def to_flat(self) -> list[float]:
        return [c for xy in self.vertices for c in xy]


@dataclass(frozen=True)
class ConfusionCounts:
    intersection: int
    pred_area: int
    gt_area: int
    union: int


# --- Operations ---

def rasterize_polygon(poly: Polygon, width: int, height: int) -> BinaryMask:
    """Even-odd fill sampled at pixel centres (j + 0.5, i + 0.5), clipped to the image.

    Crossing-number test vectorised per edge: each edge toggles every pixel
    centre on a crossing scanline that lies left of the intersection.
    """
    if width <= 0 or height <= 0:
        raise ShapeMismatchError(f"image size must be positive, got {width}x{height}")
    verts = np.asarray(poly.vertices, dtype=np.float64)
    out = np.zeros((height, width), dtype=bool)

    xmin, ymin = verts.min(axis=0)
    xmax, ymax = verts.max(axis=0)
    row_lo, row_hi = max(0, math.floor(ymin)), min(height, math.ceil(ymax))
    col_lo, col_hi = max(0, math.floor(xmin)), min(width, math.ceil(xmax))
    if row_hi <= row_lo or col_hi <= col_lo:
        return BinaryMask._wrap(out)

    cy = np.arange(row_lo, row_hi, dtype=np.float64) + 0.5
    cx = np.arange(col_lo, col_hi, dtype=np.float64) + 0.5
    inside = np.zeros((cy.size, cx.size), dtype=bool)

    # Columns left of xmin see every crossing of their row (an even number), so the window is exact.
    for (x0, y0), (x1, y1) in zip(verts, np.roll(verts, -1, axis=0)):
        if y0 == y1:
            continue
        crosses = ((y0 <= cy) & (cy < y1)) | ((y1 <= cy) & (cy < y0))
        if not crosses.any():
            continue
        xi = x0 + (cy[crosses] - y0) * (x1 - x0) / (y1 - y0)
        inside[crosses] ^= cx[None, :] < xi[:, None]

    out[row_lo:row_hi, col_lo:col_hi] = inside
    return BinaryMask._wrap(out)


def rasterize_polygons(polys: Iterable[Polygon], width: int, height: int) -> BinaryMask:
    """Rasterize each ring independently and OR the results."""
    acc = np.zeros((height, width), dtype=bool)
    for poly in polys:
        acc |= rasterize_polygon(poly, width, height).as_bool()
    return BinaryMask._wrap(acc)


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Binary dilation by a (2r+1)x(2r+1) square; pixels beyond the border count as 0."""
    if radius < 0 or int(radius) != radius:
        raise ValueError(f"dilation radius must be a non-negative integer, got {radius}")
    if radius == 0:
        return mask
    # Past max(h, w) every pixel already reaches every other one.
    radius = min(int(radius), max(mask.width, mask.height))
    grown = ndimage.maximum_filter(mask.data, size=2 * radius + 1, mode="constant", cval=0)
    return BinaryMask._wrap(grown)


def rle_encode(mask: BinaryMask) -> RleMask:
    flat = mask.data.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return RleMask(height=mask.height, width=mask.width, counts=tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> BinaryMask:
    if rle.height <= 0 or rle.width <= 0:
        raise MalformedRleError(f"RLE size must be positive, got [{rle.height}, {rle.width}]")
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.size == 0 or np.any(counts < 0):
        raise MalformedRleError("RLE counts must be a non-empty list of non-negative integers")
    total = int(counts.sum())
    if total != rle.height * rle.width:
        raise MalformedRleError(f"RLE counts sum to {total}, expected {rle.height}x{rle.width}={rle.height * rle.width}")
    values = (np.arange(counts.size) % 2).astype(np.uint8)
    flat = np.repeat(values, counts)
    return BinaryMask._wrap(flat.reshape((rle.height, rle.width), order="F"))


def mask_from_bbox(box: BBox, width: int, height: int) -> BinaryMask:
    """Pixels whose centres fall inside the half-open box [x, x+w) x [y, y+h)."""
    out = np.zeros((height, width), dtype=np.uint8)
    c0 = min(max(math.ceil(box.x - 0.5), 0), width)
    c1 = min(max(math.ceil(box.x2 - 0.5), 0), width)
    r0 = min(max(math.ceil(box.y - 0.5), 0), height)
    r1 = min(max(math.ceil(box.y2 - 0.5), 0), height)
    out[r0:r1, c0:c1] = 1
    return BinaryMask._wrap(out)


def translate_mask(mask: BinaryMask, dx: int, dy: int) -> BinaryMask:
    """Shift by whole pixels; content pushed past the border is dropped."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.uint8)
    if abs(dx) >= w or abs(dy) >= h:
        return BinaryMask._wrap(out)
    src = mask.data[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return BinaryMask._wrap(out)


def pixel_counts(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
    p, g = pred.as_bool(), gt.as_bool()
    inter = int(np.count_nonzero(p & g))
    pred_area, gt_area = int(np.count_nonzero(p)), int(np.count_nonzero(g))
    return ConfusionCounts(
        intersection=inter,
        pred_area=pred_area,
        gt_area=gt_area,
        union=pred_area + gt_area - inter,
    )
