"""Pixel-level geometry: binary masks, boxes, polygons, RLE and IoU.

Conventions:

* masks are row-major ``(height, width)`` boolean grids;
* a pixel ``(x, y)`` belongs to a polygon iff its center ``(x + 0.5, y + 0.5)``
  is inside under the even-odd rule;
* boxes are half-open, ``[x_min, x_max) x [y_min, y_max)``;
* RLE runs alternate background/foreground in row-major order and always
  start with a background run (a leading 0 when pixel 0 is foreground).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise GeometryError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.shape[0] < 1 or bits.shape[1] < 1:
            raise GeometryError(f"mask dimensions must be >= 1, got {bits.shape}")
        if bits is self.bits and not bits.flags.writeable:
            return
        object.__setattr__(self, "bits", _frozen(bits.copy()))

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, count={self.count()})"


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def contains_box(self, other: "BBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )

    def clip_mask(self, m: BinaryMask) -> BinaryMask:
        """Zero every pixel of ``m`` outside this box."""
        out = np.zeros_like(m.bits)
        ys = slice(max(self.y_min, 0), min(self.y_max, m.height))
        xs = slice(max(self.x_min, 0), min(self.x_max, m.width))
        out[ys, xs] = m.bits[ys, xs]
        return BinaryMask(out)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if not all(np.isfinite(v).all() for v in verts):
            raise GeometryError("polygon vertices must be finite")
        if len(set(verts)) < 3:
            raise GeometryError("polygon needs at least 3 distinct vertices")
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def from_points(cls, points: Iterable[Sequence[float]]) -> "Polygon":
        return cls(tuple((p[0], p[1]) for p in points))


@dataclass(frozen=True, eq=False)
class RleMask:
    width: int
    height: int
    runs: np.ndarray

    def __post_init__(self):
        runs = np.asarray(self.runs, dtype=np.int64).ravel()
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"RLE dimensions must be >= 1, got {self.width}x{self.height}")
        if runs.size == 0:
            raise GeometryError("RLE has no runs")
        if (runs < 0).any():
            raise GeometryError("RLE runs must be non-negative")
        if int(runs.sum()) != self.width * self.height:
            raise GeometryError(
                f"RLE run sum {int(runs.sum())} != width*height {self.width * self.height}"
            )
        if runs.size > 1 and (runs[1:] == 0).any():
            raise GeometryError("RLE has an interior zero run")
        object.__setattr__(self, "runs", _frozen(runs))

    def area(self) -> int:
        return int(self.runs[1::2].sum())

    def to_json(self) -> dict:
        return {"w": self.width, "h": self.height, "runs": [int(r) for r in self.runs]}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        return cls(int(obj["w"]), int(obj["h"]), obj["runs"])

    def __eq__(self, other):
        if not isinstance(other, RleMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and bool(
            np.array_equal(self.runs, other.runs)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.runs.tobytes()))


def rasterize(poly: Polygon, width: int, height: int) -> BinaryMask:
    """Even-odd scanline fill sampled at pixel centers."""
    if width < 1 or height < 1:
        raise GeometryError(f"raster dimensions must be >= 1, got {width}x{height}")
    v = np.asarray(poly.vertices, dtype=float)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    centers_x = np.arange(width) + 0.5
    out = np.zeros((height, width), dtype=bool)

    row_lo = max(int(np.floor(v[:, 1].min() - 0.5)), 0)
    row_hi = min(int(np.ceil(v[:, 1].max() + 0.5)), height)
    for row in range(row_lo, row_hi):
        yc = row + 0.5
        crosses = (y0 > yc) != (y1 > yc)
        if not crosses.any():
            continue
        ax, ay, bx, by = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort((bx - ax) * (yc - ay) / (by - ay) + ax)
        # a center is inside iff an odd number of crossings lie strictly right of it
        right = xs.size - np.searchsorted(xs, centers_x, side="right")
        out[row] = (right % 2) == 1
    return BinaryMask(out)


def rasterize_many(polys: Iterable[Polygon], width: int, height: int) -> BinaryMask:
    """Union of several polygon rasters (multi-part annotations)."""
    acc = np.zeros((height, width), dtype=bool)
    for p in polys:
        acc |= rasterize(p, width, height).bits
    return BinaryMask(acc)


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise GeometryError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    _check_same_shape(a, b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 0.0
    return inter / union


def iou_matrix(a: Sequence[BinaryMask], b: Sequence[BinaryMask]) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``; all masks must share a shape."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    shape = a[0].shape
    for m in (*a, *b):
        if m.shape != shape:
            raise GeometryError(f"mask shape mismatch: {m.shape} vs {shape}")
    fa = np.stack([m.bits.ravel() for m in a]).astype(np.int64)
    fb = np.stack([m.bits.ravel() for m in b]).astype(np.int64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return out


def rle_encode(m: BinaryMask) -> RleMask:
    flat = m.bits.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return RleMask(m.width, m.height, runs)


def rle_decode(r: RleMask) -> BinaryMask:
    values = np.zeros(r.runs.size, dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, r.runs)
    return BinaryMask(flat.reshape(r.height, r.width))


def bbox_of(m: BinaryMask) -> BBox:
    rows = np.flatnonzero(m.bits.any(axis=1))
    if rows.size == 0:
        raise GeometryError("bbox_of: empty mask")
    cols = np.flatnonzero(m.bits.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def area(m: BinaryMask) -> int:
    return m.count()


def containment(inner: BinaryMask, outer: BinaryMask) -> float:
    """Fraction of ``inner``'s pixels that lie inside ``outer``."""
    _check_same_shape(inner, outer)
    n = inner.count()
    if n == 0:
        raise GeometryError("containment: empty inner mask")
    return int(np.count_nonzero(inner.bits & outer.bits)) / n


def box_mask(box: BBox, width: int, height: int) -> BinaryMask:
    out = np.zeros((height, width), dtype=bool)
    out[box.y_min:box.y_max, box.x_min:box.x_max] = True
    return BinaryMask(out)
