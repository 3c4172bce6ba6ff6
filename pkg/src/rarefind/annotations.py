"""Image and annotation types plus the geometry every other module relies on.

Coordinates are continuous pixel coordinates: pixel ``(row i, col j)`` covers
``[j, j+1) x [i, i+1)`` and its center sits at ``(j + 0.5, i + 0.5)``. Boxes
are real intervals, so ``area = (x_max - x_min) * (y_max - y_min)`` exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Iterable, Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate or out-of-raster geometry."""


class QualityFlag(str, enum.Enum):
    OK = "ok"
    FAILED = "failed"
    POOR = "poor"


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"box has no area: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains_box(self, other: "BoundingBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area of an (N, 2) vertex array."""
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class SegmentationBoundary:
    """Closed polygon; the closing edge from the last vertex to the first is implied."""

    vertices: tuple[Point, ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise GeometryError(f"polygon needs at least 3 vertices, got {len(self.vertices)}")
        if polygon_area(self.to_array()) == 0.0:
            raise GeometryError("polygon encloses zero area")

    @classmethod
    def from_xy(cls, xy: Iterable[Sequence[float]]) -> "SegmentationBoundary":
        return cls(tuple(Point(float(x), float(y)) for x, y in xy))

    def to_array(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.vertices], dtype=np.float64).reshape(-1, 2)

    def to_list(self) -> list[list[float]]:
        return [[p.x, p.y] for p in self.vertices]

    @property
    def area(self) -> float:
        return abs(polygon_area(self.to_array()))

    def contains(self, point: Point) -> bool:
        return bool(_even_odd_contains(self.to_array(), np.array([point.x]), np.array([point.y]))[0])


@dataclass(frozen=True)
class InstanceMask:
    """Binary occupancy grid, ``bits[row, col]``."""

    bits: np.ndarray

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.dtype != np.bool_:
            raise GeometryError("mask bits must be a 2-D boolean array")
        if not self.bits.any():
            raise GeometryError("mask has no set pixels")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class InstanceAnnotation:
    id: str
    class_label: str
    point: Point
    boundary: Optional[SegmentationBoundary] = None
    bbox: Optional[BoundingBox] = None
    corrected: bool = False
    quality_flag: QualityFlag = QualityFlag.OK

    def __post_init__(self):
        if self.corrected and self.boundary is None:
            raise GeometryError(f"annotation {self.id}: corrected requires a boundary")

    def with_boundary(self, boundary: Optional[SegmentationBoundary], **changes) -> "InstanceAnnotation":
        """Copy with a new boundary and the bbox re-derived from it."""
        bbox = bbox_from_boundary(boundary) if boundary is not None else changes.pop("bbox", None)
        return replace(self, boundary=boundary, bbox=bbox, **changes)

    def mask(self, width: int, height: int) -> InstanceMask:
        if self.boundary is not None:
            return mask_from_boundary(self.boundary, width, height)
        if self.bbox is not None:
            return mask_from_bbox(self.bbox, width, height)
        raise GeometryError(f"annotation {self.id} has no geometry to rasterize")


@dataclass(frozen=True)
class AnnotatedImage:
    image_id: str
    width: int
    height: int
    captured_at: Optional[datetime] = None
    annotations: tuple[InstanceAnnotation, ...] = ()
    pixels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    image_path: Optional[str] = field(default=None, compare=False)  # storage location, not content

    def __post_init__(self):
        if self.pixels is not None:
            if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
                raise GeometryError(
                    f"image {self.image_id}: pixels {self.pixels.shape}/{self.pixels.dtype} "
                    f"do not match {self.height}x{self.width}x3 uint8"
                )

    def replace_annotations(self, annotations: Iterable[InstanceAnnotation]) -> "AnnotatedImage":
        return replace(self, annotations=tuple(annotations))

    def annotation(self, annotation_id: str) -> InstanceAnnotation:
        for ann in self.annotations:
            if ann.id == annotation_id:
                return ann
        raise KeyError(annotation_id)

    def same_content(self, other: "AnnotatedImage") -> bool:
        """Equality including pixel data."""
        if self != other:
            return False
        if self.pixels is None or other.pixels is None:
            return self.pixels is None and other.pixels is None
        return np.array_equal(self.pixels, other.pixels)


def bbox_from_boundary(boundary: SegmentationBoundary) -> BoundingBox:
    """Axis-aligned extents of the polygon's vertex set."""
    xy = boundary.to_array()
    if len(xy) < 3 or polygon_area(xy) == 0.0:
        raise GeometryError("degenerate polygon")
    return BoundingBox(float(xy[:, 0].min()), float(xy[:, 1].min()), float(xy[:, 0].max()), float(xy[:, 1].max()))


def _even_odd_contains(xy: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # Horizontal ray to +x; an edge counts when it straddles py half-openly.
    x1, y1 = xy[:, 0], xy[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    inside = np.zeros(px.shape, dtype=bool)
    for ax, ay, bx, by in zip(x1, y1, x2, y2):
        straddle = (ay > py) != (by > py)
        if not straddle.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= straddle & (px < xc)
    return inside


def rasterize_polygon(xy: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean raster, set where the pixel center is inside ``xy`` (even-odd)."""
    out = np.zeros((height, width), dtype=bool)
    if width < 1 or height < 1:
        return out
    x1, y1 = xy[:, 0], xy[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    rows = np.arange(max(0, int(math.floor(y1.min() - 0.5))), min(height, int(math.ceil(y1.max() + 0.5))))
    centers_x = np.arange(width) + 0.5
    for i in rows:
        yc = i + 0.5
        straddle = (y1 > yc) != (y2 > yc)
        if not straddle.any():
            continue
        ax, ay, bx, by = x1[straddle], y1[straddle], x2[straddle], y2[straddle]
        crossings = ax + (yc - ay) * (bx - ax) / (by - ay)
        # parity of crossings strictly to the right of each center
        crossings.sort()
        right = len(crossings) - np.searchsorted(crossings, centers_x, side="right")
        out[i] = (right % 2) == 1
    return out


def mask_from_boundary(boundary: SegmentationBoundary, width: int, height: int) -> InstanceMask:
    if width < 1 or height < 1:
        raise GeometryError(f"raster must be at least 1x1, got {width}x{height}")
    bits = rasterize_polygon(boundary.to_array(), width, height)
    if not bits.any():
        raise GeometryError("polygon covers no pixel center of the raster")
    return InstanceMask(bits)


def bbox_raster(box: BoundingBox, width: int, height: int) -> np.ndarray:
    """Pixels whose centers fall inside the half-open box."""
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    cx = (cols >= box.x_min) & (cols < box.x_max)
    cy = (rows >= box.y_min) & (rows < box.y_max)
    return cy[:, None] & cx[None, :]


def mask_from_bbox(box: BoundingBox, width: int, height: int) -> InstanceMask:
    bits = bbox_raster(box, width, height)
    if not bits.any():
        raise GeometryError("box covers no pixel center of the raster")
    return InstanceMask(bits)


def bbox_from_mask(bits: np.ndarray) -> BoundingBox:
    """Tight box around the set pixels (pixel edges, not centers)."""
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    if len(rows) == 0:
        raise GeometryError("empty mask")
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of ``x_min, y_min, x_max, y_max``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def clip_polygon(xy: np.ndarray, x_min: float, y_min: float, x_max: float, y_max: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon to an axis-aligned rectangle."""
    out = [tuple(v) for v in xy]
    edges = (
        (lambda p: p[0] >= x_min, lambda p, q: _cross_x(p, q, x_min)),
        (lambda p: p[0] <= x_max, lambda p, q: _cross_x(p, q, x_max)),
        (lambda p: p[1] >= y_min, lambda p, q: _cross_y(p, q, y_min)),
        (lambda p: p[1] <= y_max, lambda p, q: _cross_y(p, q, y_max)),
    )
    for inside, cross in edges:
        if not out:
            break
        src, out = out, []
        prev = src[-1]
        for cur in src:
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
            prev = cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_x(p, q, x):
    t = (x - p[0]) / (q[0] - p[0])
    return (x, p[1] + t * (q[1] - p[1]))


def _cross_y(p, q, y):
    t = (y - p[1]) / (q[1] - p[1])
    return (p[0] + t * (q[0] - p[0]), y)


def clip_boundary(
    boundary: SegmentationBoundary, x_min: float, y_min: float, x_max: float, y_max: float
) -> Optional[SegmentationBoundary]:
    """Clip to a rectangle; ``None`` if nothing with area survives."""
    xy = clip_polygon(boundary.to_array(), x_min, y_min, x_max, y_max)
    if len(xy) > 1:
        # drop consecutive duplicates produced by clipping at corners
        keep = np.any(xy != np.roll(xy, 1, axis=0), axis=1)
        xy = xy[keep]
    if len(xy) < 3 or abs(polygon_area(xy)) < 1e-12:
        return None
    return SegmentationBoundary.from_xy(xy)


def clip_bbox(box: BoundingBox, x_min: float, y_min: float, x_max: float, y_max: float) -> Optional[BoundingBox]:
    nx0, ny0 = max(box.x_min, x_min), max(box.y_min, y_min)
    nx1, ny1 = min(box.x_max, x_max), min(box.y_max, y_max)
    if nx0 >= nx1 or ny0 >= ny1:
        return None
    return BoundingBox(nx0, ny0, nx1, ny1)


@dataclass(frozen=True)
class Violation:
    kind: str
    image_id: str
    annotation_id: Optional[str]
    detail: str


def validate_dataset(images: Sequence[AnnotatedImage]) -> list[Violation]:
    """Every invariant violation in ``images``; an empty list means the data is clean."""
    report: list[Violation] = []
    seen: set[str] = set()
    for img in images:
        if img.image_id in seen:
            report.append(Violation("duplicate_image_id", img.image_id, None, "image_id used more than once"))
        seen.add(img.image_id)
        W, H = img.width, img.height
        ann_ids: set[str] = set()
        for ann in img.annotations:
            if ann.id in ann_ids:
                report.append(Violation("duplicate_annotation_id", img.image_id, ann.id, "annotation id repeated"))
            ann_ids.add(ann.id)
            if not (0 <= ann.point.x <= W and 0 <= ann.point.y <= H):
                report.append(
                    Violation("out_of_bounds", img.image_id, ann.id, f"point ({ann.point.x}, {ann.point.y}) outside {W}x{H}")
                )
            if ann.bbox is not None:
                b = ann.bbox
                if b.x_min < 0 or b.y_min < 0 or b.x_max > W or b.y_max > H:
                    report.append(Violation("out_of_bounds", img.image_id, ann.id, f"bbox {b.as_tuple()} outside {W}x{H}"))
            if ann.boundary is not None:
                xy = ann.boundary.to_array()
                if xy.min() < 0 or xy[:, 0].max() > W or xy[:, 1].max() > H:
                    report.append(Violation("out_of_bounds", img.image_id, ann.id, "boundary vertex outside image"))
                expected = bbox_from_boundary(ann.boundary)
                if ann.bbox != expected:
                    got = None if ann.bbox is None else ann.bbox.as_tuple()
                    report.append(
                        Violation("bbox_mismatch", img.image_id, ann.id, f"bbox {got} != boundary extents {expected.as_tuple()}")
                    )
    return report
