"""Point prompts to segmentation boundaries, and human corrections of those boundaries."""

from __future__ import annotations

import enum
import json
import logging
import statistics
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage
from skimage import measure

from .annotations import (
    AnnotatedImage,
    GeometryError,
    InstanceAnnotation,
    Point,
    QualityFlag,
    SegmentationBoundary,
)

log = logging.getLogger(__name__)


class SegmenterUnavailable(RuntimeError):
    """Transport-level failure talking to a segmenter (remote service down, timeout...)."""


@runtime_checkable
class PromptableSegmenter(Protocol):
    name: str
    version: str

    def segment(self, pixels: np.ndarray, point: Point) -> Optional[SegmentationBoundary]:
        """Boundary of the object under ``point``, or ``None`` if there is nothing to segment."""
        ...


def trace_boundary(bits: np.ndarray) -> Optional[SegmentationBoundary]:
    """Outer contour of a 4-connected mask as a polygon in pixel coordinates.

    Marching squares at level 0.5 over pixel centers: rasterizing the result with
    the pixel-center rule gives back ``bits`` for hole-free components.
    """
    padded = np.pad(bits.astype(np.float64), 1)
    contours = measure.find_contours(padded, 0.5, fully_connected="low")
    if not contours:
        return None
    # (row, col) in padded index space -> (x, y) continuous coordinates
    best = max(contours, key=lambda c: abs(_shoelace(c)))
    xy = np.stack([best[:, 1] - 0.5, best[:, 0] - 0.5], axis=1)
    if len(xy) > 1 and np.array_equal(xy[0], xy[-1]):
        xy = xy[:-1]
    try:
        return SegmentationBoundary.from_xy(xy)
    except GeometryError:
        return None


def _shoelace(rc: np.ndarray) -> float:
    return 0.5 * float(np.dot(rc[:, 0], np.roll(rc[:, 1], -1)) - np.dot(np.roll(rc[:, 0], -1), rc[:, 1]))


@dataclass
class ReferenceSegmenter:
    """Flood fill over near-uniform color from the prompt pixel.

    A pixel joins the region when every channel is within ``tolerance`` of the
    prompt pixel's color (4-connectivity). Regions smaller than ``min_area``
    pixels or larger than ``max_area_fraction`` of the image are treated as
    background and yield no boundary.
    """

    tolerance: int = 10
    min_area: int = 4
    max_area_fraction: float = 0.25
    name: str = "reference-floodfill"
    version: str = "1"

    def region(self, pixels: np.ndarray, point: Point) -> np.ndarray:
        h, w = pixels.shape[:2]
        r = min(int(point.y), h - 1)
        c = min(int(point.x), w - 1)
        seed = pixels[r, c].astype(np.int16)
        close = np.all(np.abs(pixels.astype(np.int16) - seed) <= self.tolerance, axis=2)
        labels, _ = ndimage.label(close)
        return labels == labels[r, c]

    def segment(self, pixels: np.ndarray, point: Point) -> Optional[SegmentationBoundary]:
        region = self.region(pixels, point)
        area = int(region.sum())
        if area < self.min_area or area > self.max_area_fraction * region.size:
            return None
        return trace_boundary(region)


def segment_point(
    segmenter: PromptableSegmenter, image: AnnotatedImage, point: Point
) -> tuple[Optional[SegmentationBoundary], QualityFlag]:
    if image.pixels is None:
        raise ValueError(f"image {image.image_id} has no pixel data loaded")
    if not (0 <= point.x < image.width and 0 <= point.y < image.height):
        raise ValueError(f"point ({point.x}, {point.y}) outside image {image.image_id}")
    boundary = segmenter.segment(image.pixels, point)
    if boundary is None or not boundary.contains(point):
        return None, QualityFlag.FAILED
    return boundary, QualityFlag.OK


def segment_annotation(segmenter: PromptableSegmenter, image: AnnotatedImage, ann: InstanceAnnotation) -> InstanceAnnotation:
    """Annotation with boundary + derived bbox, or flagged failed and stripped of geometry."""
    boundary, flag = segment_point(segmenter, image, ann.point)
    if boundary is None:
        return replace(ann, boundary=None, bbox=None, corrected=False, quality_flag=flag)
    return ann.with_boundary(boundary, corrected=False, quality_flag=flag)


@dataclass
class SegmentationSummary:
    per_class: dict[str, dict[str, int]] = field(default_factory=dict)
    transport_errors: dict[str, str] = field(default_factory=dict)

    def failure_rate(self, label: str) -> float:
        c = self.per_class[label]
        return c["failed"] / c["total"] if c["total"] else 0.0

    def lines(self) -> list[str]:
        out = []
        for label in sorted(self.per_class):
            c = self.per_class[label]
            out.append(
                f"{label}: total={c['total']} ok={c['ok']} poor={c['poor']} failed={c['failed']} "
                f"failure_rate={self.failure_rate(label):.3f}"
            )
        for image_id, msg in sorted(self.transport_errors.items()):
            out.append(f"transport error on {image_id}: {msg}")
        return out


def flag_poor_boundaries(
    images: Sequence[AnnotatedImage],
    classes: Optional[Iterable[str]] = None,
    high: float = 4.0,
    low: float = 0.25,
) -> list[AnnotatedImage]:
    """Mark boundaries whose area is far from the class median as poor."""
    wanted = None if classes is None else set(classes)
    areas: dict[str, list[float]] = defaultdict(list)
    for img in images:
        for ann in img.annotations:
            if ann.boundary is not None and (wanted is None or ann.class_label in wanted):
                areas[ann.class_label].append(ann.boundary.area)
    medians = {k: statistics.median(v) for k, v in areas.items()}
    out = []
    for img in images:
        anns = []
        for ann in img.annotations:
            med = medians.get(ann.class_label)
            if ann.boundary is not None and med and (wanted is None or ann.class_label in wanted) and not ann.corrected:
                ratio = ann.boundary.area / med
                if ratio > high or ratio < low:
                    ann = replace(ann, quality_flag=QualityFlag.POOR)
            anns.append(ann)
        out.append(img.replace_annotations(anns))
    return out


def segment_dataset(
    segmenter: PromptableSegmenter,
    images: Sequence[AnnotatedImage],
    classes: Optional[Iterable[str]] = None,
    max_workers: int = 1,
    poor_ratio: tuple[float, float] = (0.25, 4.0),
) -> tuple[list[AnnotatedImage], SegmentationSummary]:
    """Segment every annotation whose class passes the filter.

    Transport errors are recorded per image and leave that image unchanged.
    Results come back in input order regardless of ``max_workers``.
    """
    wanted = None if classes is None else set(classes)

    def work(img: AnnotatedImage):
        try:
            anns = [
                segment_annotation(segmenter, img, a) if wanted is None or a.class_label in wanted else a
                for a in img.annotations
            ]
            return img.replace_annotations(anns), None
        except SegmenterUnavailable as exc:
            return img, str(exc)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(work, images))
    else:
        results = [work(img) for img in images]

    summary = SegmentationSummary()
    out = []
    for img, err in results:
        if err is not None:
            summary.transport_errors[img.image_id] = err
        out.append(img)
    low, high = poor_ratio
    out = flag_poor_boundaries(out, classes=wanted, high=high, low=low)
    for img in out:
        if img.image_id in summary.transport_errors:
            continue
        for ann in img.annotations:
            if wanted is not None and ann.class_label not in wanted:
                continue
            c = summary.per_class.setdefault(ann.class_label, {"total": 0, "ok": 0, "poor": 0, "failed": 0})
            c["total"] += 1
            c[ann.quality_flag.value] += 1
    return out, summary


class CorrectionReason(str, enum.Enum):
    BACKGROUND_INCLUDED = "background_included"
    PART_EXCLUDED = "part_excluded"
    OTHER = "other"


@dataclass(frozen=True)
class CorrectionRecord:
    image_id: str
    annotation_id: str
    corrected_boundary: SegmentationBoundary
    reason: CorrectionReason = CorrectionReason.OTHER

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "annotation_id": self.annotation_id,
            "corrected_boundary": self.corrected_boundary.to_list(),
            "reason": self.reason.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorrectionRecord":
        return cls(
            image_id=str(obj["image_id"]),
            annotation_id=str(obj["annotation_id"]),
            corrected_boundary=SegmentationBoundary.from_xy(obj["corrected_boundary"]),
            reason=CorrectionReason(obj.get("reason", "other")),
        )


def load_corrections(path) -> list[CorrectionRecord]:
    """Read a correction batch: a JSON array of records, vertices as ``[x, y]`` pairs."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError(f"{path}: correction file must hold a JSON array")
    return [CorrectionRecord.from_json(obj) for obj in data]


def save_corrections(records: Sequence[CorrectionRecord], path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=2))


@dataclass(frozen=True)
class AuditEntry:
    image_id: str
    annotation_id: str
    action: str  # "applied" | "unchanged" | "rejected"
    detail: str


def apply_corrections(
    images: Sequence[AnnotatedImage], corrections: Sequence[CorrectionRecord]
) -> tuple[list[AnnotatedImage], list[AuditEntry]]:
    index = {img.image_id: i for i, img in enumerate(images)}
    out = list(images)
    audit: list[AuditEntry] = []
    for rec in corrections:
        i = index.get(rec.image_id)
        if i is None:
            audit.append(AuditEntry(rec.image_id, rec.annotation_id, "rejected", "unknown image_id"))
            continue
        img = out[i]
        try:
            old = img.annotation(rec.annotation_id)
        except KeyError:
            audit.append(AuditEntry(rec.image_id, rec.annotation_id, "rejected", "unknown annotation_id"))
            continue
        xy = rec.corrected_boundary.to_array()
        if xy.min() < 0 or xy[:, 0].max() > img.width or xy[:, 1].max() > img.height:
            audit.append(AuditEntry(rec.image_id, rec.annotation_id, "rejected", "boundary outside image"))
            continue
        new = old.with_boundary(rec.corrected_boundary, corrected=True, quality_flag=QualityFlag.OK)
        if new == old:
            audit.append(AuditEntry(rec.image_id, rec.annotation_id, "unchanged", "already corrected"))
            continue
        out[i] = img.replace_annotations(new if a.id == old.id else a for a in img.annotations)
        audit.append(AuditEntry(rec.image_id, rec.annotation_id, "applied", rec.reason.value))
    return out, audit


@dataclass
class HttpSegmenter:
    """Adapter for a remote promptable segmenter.

    POSTs ``{"image_png": <base64>, "point": [x, y]}`` to ``url`` and expects
    ``{"boundary": [[x, y], ...]}`` or ``{"boundary": null}`` back.
    """

    url: str
    timeout: float = 30.0
    name: str = "http"
    version: str = "1"

    def segment(self, pixels: np.ndarray, point: Point) -> Optional[SegmentationBoundary]:
        import base64
        import io
        import urllib.error
        import urllib.request

        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(pixels).save(buf, format="PNG")
        body = json.dumps({"image_png": base64.b64encode(buf.getvalue()).decode(), "point": [point.x, point.y]}).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read())
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise SegmenterUnavailable(f"{self.url}: {exc}") from exc
        xy = reply.get("boundary")
        if not xy:
            return None
        try:
            return SegmentationBoundary.from_xy(xy)
        except GeometryError:
            return None


def build_segmenter(spec: dict) -> PromptableSegmenter:
    spec = dict(spec)
    kind = spec.pop("name", "reference")
    if kind == "reference":
        return ReferenceSegmenter(**spec)
    if kind == "http":
        return HttpSegmenter(**spec)
    raise ValueError(f"unknown segmenter {kind!r}")
