"""AP@0.5 for a single novel class, seed aggregation and the ablation results table."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .annotations import AnnotatedImage, BoundingBox, iou_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    image_id: str
    bbox: BoundingBox
    confidence: float
    class_label: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict:
        d = {"image_id": self.image_id, "bbox": list(self.bbox.as_tuple()), "confidence": self.confidence}
        if self.class_label is not None:
            d["class_label"] = self.class_label
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(d["image_id"], BoundingBox(*d["bbox"]), float(d["confidence"]), d.get("class_label"))


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    bbox: BoundingBox
    class_label: Optional[str] = None


def write_detections(detections: Iterable[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_json()) + "\n")


def read_detections(path) -> list[Detection]:
    with open(path) as fh:
        return [Detection.from_json(json.loads(line)) for line in fh if line.strip()]


def ground_truth_from_images(images: Sequence[AnnotatedImage], class_label: Optional[str] = None) -> list[GroundTruth]:
    return [
        GroundTruth(img.image_id, a.bbox, a.class_label)
        for img in images
        for a in img.annotations
        if a.bbox is not None and (class_label is None or a.class_label == class_label)
    ]


@dataclass
class MatchResult:
    is_tp: list[bool]              # aligned with ``order``
    order: list[int]               # indices into the input detections, confidence-descending
    confidences: list[float]
    matched_gt: list[Optional[int]]
    unmatched_gt: dict[str, int]   # per image

    @property
    def tp_count(self) -> int:
        return sum(self.is_tp)


def match_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    class_aware: bool = True,
) -> MatchResult:
    """Greedy matching in descending confidence (stable for ties).

    Each detection goes to its highest-IoU ground truth among those not yet
    matched; it is a TP iff that IoU reaches ``iou_threshold``. With
    ``class_aware`` a detection can only match ground truth of its own class.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    by_image: dict[str, list[int]] = {}
    for g, gt in enumerate(ground_truth):
        by_image.setdefault(gt.image_id, []).append(g)
    taken = [False] * len(ground_truth)
    is_tp, matched = [], []
    for i in order:
        det = detections[i]
        cands = [
            g for g in by_image.get(det.image_id, [])
            if not taken[g] and (not class_aware or det.class_label is None or ground_truth[g].class_label is None
                                 or ground_truth[g].class_label == det.class_label)
        ]
        best, best_iou = None, -1.0
        if cands:
            ious = iou_matrix(np.array([det.bbox.as_tuple()]), np.array([ground_truth[g].bbox.as_tuple() for g in cands]))[0]
            k = int(np.argmax(ious))
            best, best_iou = cands[k], float(ious[k])
        if best is not None and best_iou >= iou_threshold:
            taken[best] = True
            is_tp.append(True)
            matched.append(best)
        else:
            is_tp.append(False)
            matched.append(None)
    unmatched: dict[str, int] = {}
    for image_id, gs in by_image.items():
        unmatched[image_id] = sum(1 for g in gs if not taken[g])
    return MatchResult(is_tp, order, [detections[i].confidence for i in order], matched, unmatched)


def average_precision(is_tp: Sequence[bool], total_ground_truth: int) -> float:
    """All-points interpolated AP from TP/FP labels already sorted by confidence.

    ``AP = sum_i (R_i - R_{i-1}) * max_{j >= i} P_j``. With no ground truth the
    result is 1.0 if there are no detections either, else 0.0.
    """
    n = len(is_tp)
    if total_ground_truth <= 0:
        if n == 0:
            log.info("empty class: no ground truth and no detections, AP defined as 1.0")
            return 1.0
        return 0.0
    if n == 0:
        return 0.0
    if n <= EXACT_AP_LIMIT:
        return _average_precision_exact(is_tp, total_ground_truth)
    tp = np.cumsum(np.asarray(is_tp, dtype=np.float64))
    fp = np.arange(1, n + 1) - tp
    recall = tp / total_ground_truth
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps]))


EXACT_AP_LIMIT = 5000


def _average_precision_exact(is_tp: Sequence[bool], total_ground_truth: int) -> float:
    # rational arithmetic, rounded once; each TP adds 1/G recall at the best precision to its right
    n = len(is_tp)
    prec = []
    tp = 0
    for k, t in enumerate(is_tp, start=1):
        tp += bool(t)
        prec.append((tp, k))
    best = (0, 1)
    area = Fraction(0)
    for k in range(n - 1, -1, -1):
        a, b = prec[k]
        if a * best[1] > best[0] * b:
            best = (a, b)
        if is_tp[k]:
            area += Fraction(best[0], best[1])
    return float(area / total_ground_truth)


def evaluate_ap(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    class_aware: bool = True,
) -> float:
    m = match_detections(detections, ground_truth, iou_threshold, class_aware)
    return average_precision(m.is_tp, len(ground_truth))


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    precision: float
    recall: float
    true_positives: int
    false_positives: int
    false_negatives: int


def operating_point(
    detections: Sequence[Detection], ground_truth: Sequence[GroundTruth], threshold: float, iou_threshold: float = 0.5
) -> OperatingPoint:
    """Precision/recall of the detections at or above a fixed confidence, for field use."""
    kept = [d for d in detections if d.confidence >= threshold]
    m = match_detections(kept, ground_truth, iou_threshold)
    tp = m.tp_count
    fp = len(kept) - tp
    fn = len(ground_truth) - tp
    return OperatingPoint(
        threshold, tp / len(kept) if kept else 1.0, tp / len(ground_truth) if ground_truth else 1.0, tp, fp, fn
    )


# --- aggregation ------------------------------------------------------------------


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: Optional[float]
    n: int

    def format(self, scale: float = 1.0) -> str:
        if self.std is None:
            return f"{self.mean * scale:.1f}"
        return f"{self.mean * scale:.1f}±{self.std * scale:.1f}"


def aggregate_runs(values: Sequence[float], ddof: int = 1) -> Aggregate:
    """Mean and standard deviation (sample, ``ddof=1``, by default); std is ``None`` for one run."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no values to aggregate")
    mean = math.fsum(vals) / len(vals)
    if len(vals) <= ddof:
        return Aggregate(mean, None, len(vals))
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - ddof)
    return Aggregate(mean, math.sqrt(var), len(vals))


MASK_LABELS = {"none": "None", "bounding_box": "Bounding Box", "segmentation": "Segment."}


@dataclass(frozen=True, order=True)
class CellKey:
    pretrain: bool
    novel_mask_mode: str
    base_mask_mode: str
    sample_size: int
    backend: str

    @property
    def row(self) -> tuple[bool, str, str]:
        return (self.pretrain, self.novel_mask_mode, self.base_mask_mode)

    @property
    def column(self) -> tuple[str, int]:
        return (self.backend, self.sample_size)

    def to_json(self) -> dict:
        return {
            "pretrain": self.pretrain,
            "novel_mask_mode": self.novel_mask_mode,
            "base_mask_mode": self.base_mask_mode,
            "sample_size": self.sample_size,
            "backend": self.backend,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CellKey":
        return cls(bool(d["pretrain"]), d["novel_mask_mode"], d["base_mask_mode"], int(d["sample_size"]), d["backend"])


@dataclass
class EvalResult:
    key: CellKey
    per_seed: dict[int, float] = field(default_factory=dict)
    failed_seeds: list[int] = field(default_factory=list)
    ddof: int = 1

    @property
    def values(self) -> list[float]:
        return [self.per_seed[s] for s in sorted(self.per_seed)]

    @property
    def aggregate(self) -> Aggregate:
        return aggregate_runs(self.values, self.ddof)

    @property
    def mean(self) -> float:
        return self.aggregate.mean

    @property
    def std(self) -> Optional[float]:
        return self.aggregate.std


# Row order of the ablation table: pre-training x (novel mask, base mask).
TABLE_ROWS: tuple[tuple[bool, str, str], ...] = tuple(
    (pre, novel, base)
    for pre in (False, True)
    for novel, base in (
        ("none", "none"),
        ("none", "segmentation"),
        ("bounding_box", "segmentation"),
        ("segmentation", "segmentation"),
    )
)


def _columns(results: Sequence[EvalResult], backends=None, sizes=None):
    backends = backends or sorted({r.key.backend for r in results})
    sizes = sizes or sorted({r.key.sample_size for r in results})
    return [(b, s) for b in backends for s in sizes]


def rank_marks(values: dict, higher_is_better: bool = True) -> dict:
    """``{key: "best" | "second"}`` by value; ties share a mark."""
    distinct = sorted({v for v in values.values()}, reverse=higher_is_better)
    marks = {}
    for k, v in values.items():
        if distinct and v == distinct[0]:
            marks[k] = "best"
        elif len(distinct) > 1 and v == distinct[1]:
            marks[k] = "second"
    return marks


def render_results_table(
    results: Sequence[EvalResult],
    rows: Sequence[tuple[bool, str, str]] = TABLE_ROWS,
    backends: Optional[Sequence[str]] = None,
    sizes: Optional[Sequence[int]] = None,
    scale: float = 100.0,
) -> str:
    """Text grid: one row per (pretrain, novel mask, base mask), one column per (backend, size).

    Cells read ``mean±std`` in AP points; the best cell of each column is
    marked ``*`` and the second best ``+``; missing cells are ``-``.
    """
    cols = _columns(results, backends, sizes) if results or (backends and sizes) else []
    by_key = {r.key: r for r in results if r.per_seed}
    cells: dict[tuple, str] = {}
    for col in cols:
        # rank on the displayed (rounded) means, as a reader of the table would
        shown = {}
        for row in rows:
            r = by_key.get(CellKey(row[0], row[1], row[2], col[1], col[0]))
            if r is not None:
                shown[row] = round(r.mean * scale, 1)
        marks = rank_marks(shown)
        for row in rows:
            r = by_key.get(CellKey(row[0], row[1], row[2], col[1], col[0]))
            if r is None:
                cells[(row, col)] = "-"
                continue
            text = r.aggregate.format(scale)
            mark = {"best": "*", "second": "+"}.get(marks.get(row), "")
            cells[(row, col)] = text + mark

    header1 = ["Pre-Train", "Novel Mask", "Base Mask"] + [b for b, _ in cols]
    header2 = ["", "", ""] + [str(s) for _, s in cols]
    body = [
        ["Y" if row[0] else "N", MASK_LABELS.get(row[1], row[1]), MASK_LABELS.get(row[2], row[2])]
        + [cells[(row, col)] for col in cols]
        for row in (rows if cols else [])
    ]
    table = [header1, header2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(header1))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(2, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def export_results(results: Sequence[EvalResult]) -> dict:
    """Machine-readable form; per-seed values are kept at full precision."""
    return {
        "schema_version": 1,
        "cells": [
            {
                **r.key.to_json(),
                "per_seed": {str(s): v for s, v in sorted(r.per_seed.items())},
                "failed_seeds": sorted(r.failed_seeds),
                "mean": r.mean if r.per_seed else None,
                "std": r.std if r.per_seed else None,
                "ddof": r.ddof,
            }
            for r in sorted(results, key=lambda r: r.key)
        ],
    }


def import_results(doc: dict) -> list[EvalResult]:
    out = []
    for c in doc["cells"]:
        r = EvalResult(
            CellKey.from_json(c),
            {int(s): float(v) for s, v in c["per_seed"].items()},
            list(c.get("failed_seeds", [])),
            int(c.get("ddof", 1)),
        )
        if r.per_seed and c.get("mean") is not None and abs(r.mean - c["mean"]) > 1e-12:
            raise ValueError(f"cell {r.key}: stored mean {c['mean']} disagrees with per-seed values")
        out.append(r)
    return out


def save_results(results: Sequence[EvalResult], json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(export_results(results), indent=1))
    if csv_path is not None:
        Path(csv_path).write_text(results_csv(results))


def load_results(json_path) -> list[EvalResult]:
    return import_results(json.loads(Path(json_path).read_text()))


def results_csv(results: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["pretrain", "novel_mask_mode", "base_mask_mode", "sample_size", "backend", "n", "mean", "std", "per_seed"])
    for r in sorted(results, key=lambda r: r.key):
        agg = r.aggregate if r.per_seed else None
        w.writerow(
            [
                "Y" if r.key.pretrain else "N", r.key.novel_mask_mode, r.key.base_mask_mode, r.key.sample_size,
                r.key.backend, len(r.per_seed), "" if agg is None else repr(agg.mean),
                "" if agg is None or agg.std is None else repr(agg.std),
                ";".join(f"{s}:{v!r}" for s, v in sorted(r.per_seed.items())),
            ]
        )
    return buf.getvalue()
