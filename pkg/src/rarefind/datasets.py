"""Dataset ingestion, the canonical JSON format, and train/validation/test splits.

Point CSV columns (schema ``point-csv/1``)::

    image_path, image_id, captured_at, class_label, point_x, point_y, image_width, image_height

``captured_at`` is ISO-8601. One row per point annotation; rows sharing an
``image_id`` are grouped into one image.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .annotations import (
    AnnotatedImage,
    BoundingBox,
    GeometryError,
    InstanceAnnotation,
    Point,
    QualityFlag,
    SegmentationBoundary,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "image_path",
    "image_id",
    "captured_at",
    "class_label",
    "point_x",
    "point_y",
    "image_width",
    "image_height",
)


class SchemaError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    images: list[AnnotatedImage] = field(default_factory=list)

    @property
    def class_vocabulary(self) -> dict[str, int]:
        """Annotation count per class label, sorted by label."""
        tally = Counter(a.class_label for img in self.images for a in img.annotations)
        return dict(sorted(tally.items()))

    def by_id(self) -> dict[str, AnnotatedImage]:
        return {img.image_id: img for img in self.images}

    def subset(self, image_ids: Sequence[str], name: Optional[str] = None) -> "Dataset":
        lookup = self.by_id()
        return Dataset(name or self.name, [lookup[i] for i in image_ids])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.name == other.name
            and len(self.images) == len(other.images)
            and all(a.same_content(b) for a, b in zip(self.images, other.images))
        )


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    row: dict

    def to_json(self) -> str:
        return json.dumps({"line": self.line, "reason": self.reason, "row": self.row})


def _load_pixels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def ingest_point_csv(path, images_root=None, name: Optional[str] = None) -> tuple[Dataset, list[Reject]]:
    """Build a dataset from a point-annotation CSV export.

    A missing required column raises :class:`SchemaError`. Any row that cannot
    be parsed, or whose point falls outside its stated image size, becomes a
    :class:`Reject` and ingestion carries on. When ``images_root`` is given the
    pixel files are loaded and their size must match the CSV.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing required column(s): {', '.join(missing)}")
        rows = list(reader)

    rejects: list[Reject] = []
    grouped: dict[str, dict] = {}
    for lineno, row in enumerate(rows, start=2):
        try:
            image_id = row["image_id"].strip()
            if not image_id:
                raise ValueError("empty image_id")
            label = row["class_label"].strip()
            if not label:
                raise ValueError("empty class_label")
            w, h = int(row["image_width"]), int(row["image_height"])
            if w < 1 or h < 1:
                raise ValueError(f"bad image size {w}x{h}")
            pt = Point(float(row["point_x"]), float(row["point_y"]))
            if not (0 <= pt.x < w and 0 <= pt.y < h):
                raise ValueError(f"point ({pt.x}, {pt.y}) outside {w}x{h}")
            ts = datetime.fromisoformat(row["captured_at"].strip())
        except (ValueError, GeometryError, TypeError) as exc:
            rejects.append(Reject(lineno, str(exc), dict(row)))
            continue
        entry = grouped.setdefault(
            image_id, {"path": row["image_path"], "w": w, "h": h, "ts": ts, "anns": []}
        )
        if (entry["w"], entry["h"], entry["ts"], entry["path"]) != (w, h, ts, row["image_path"]):
            rejects.append(Reject(lineno, "image metadata disagrees with earlier rows", dict(row)))
            continue
        ann_id = f"{image_id}/{len(entry['anns'])}"
        entry["anns"].append(InstanceAnnotation(id=ann_id, class_label=label, point=pt))

    images = []
    for image_id, e in grouped.items():
        pixels = None
        if images_root is not None:
            px_path = Path(images_root) / e["path"]
            pixels = _load_pixels(px_path)
            if pixels.shape[:2] != (e["h"], e["w"]):
                reason = f"{image_id}: pixel file is {pixels.shape[1]}x{pixels.shape[0]}, csv says {e['w']}x{e['h']}"
                rejects.append(Reject(0, reason, {"image_id": image_id}))
                continue
        images.append(
            AnnotatedImage(
                image_id=image_id,
                width=e["w"],
                height=e["h"],
                captured_at=e["ts"],
                annotations=tuple(e["anns"]),
                pixels=pixels,
                image_path=e["path"],
            )
        )
    return Dataset(name or path.stem, images), rejects


def write_rejects(rejects: Sequence[Reject], path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in rejects))


def _ann_to_json(ann: InstanceAnnotation) -> dict:
    return {
        "id": ann.id,
        "class_label": ann.class_label,
        "point": [ann.point.x, ann.point.y],
        "boundary": None if ann.boundary is None else ann.boundary.to_list(),
        "bbox": None if ann.bbox is None else list(ann.bbox.as_tuple()),
        "corrected": ann.corrected,
        "quality_flag": ann.quality_flag.value,
    }


def _ann_from_json(obj: dict) -> InstanceAnnotation:
    return InstanceAnnotation(
        id=obj["id"],
        class_label=obj["class_label"],
        point=Point(*obj["point"]),
        boundary=None if obj.get("boundary") is None else SegmentationBoundary.from_xy(obj["boundary"]),
        bbox=None if obj.get("bbox") is None else BoundingBox(*obj["bbox"]),
        corrected=bool(obj.get("corrected", False)),
        quality_flag=QualityFlag(obj.get("quality_flag", "ok")),
    )


def save_dataset(dataset: Dataset, path, write_pixels: bool = True) -> Path:
    """Write ``dataset`` as JSON; pixel arrays go to PNG files next to it.

    Images that carry pixels but no ``image_path`` are written to
    ``images/<image_id>.png`` relative to the JSON file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    for img in dataset.images:
        rel = img.image_path
        if img.pixels is not None and write_pixels:
            rel = rel or f"images/{img.image_id}.png"
            target = path.parent / rel
            if not target.exists() or not np.array_equal(_load_pixels(target), img.pixels):
                target.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(img.pixels).save(target)
        records.append(
            {
                "image_id": img.image_id,
                "width": img.width,
                "height": img.height,
                "captured_at": None if img.captured_at is None else img.captured_at.isoformat(),
                "image_path": rel,
                "annotations": [_ann_to_json(a) for a in img.annotations],
            }
        )
    doc = {"schema_version": SCHEMA_VERSION, "name": dataset.name, "images": records}
    # repr round-trips floats exactly
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_dataset(path, load_pixels: bool = True) -> Dataset:
    path = Path(path)
    doc = json.loads(path.read_text())
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: file schema_version {version} but this reader supports {SCHEMA_VERSION}")
    images = []
    for rec in doc["images"]:
        pixels = None
        if load_pixels and rec.get("image_path"):
            px = path.parent / rec["image_path"]
            if px.exists():
                pixels = _load_pixels(px)
        images.append(
            AnnotatedImage(
                image_id=rec["image_id"],
                width=int(rec["width"]),
                height=int(rec["height"]),
                captured_at=None if rec.get("captured_at") is None else datetime.fromisoformat(rec["captured_at"]),
                annotations=tuple(_ann_from_json(a) for a in rec["annotations"]),
                pixels=pixels,
                image_path=rec.get("image_path"),
            )
        )
    return Dataset(doc["name"], images)


# --- splits -----------------------------------------------------------------

SPLIT_NAMES = ("test", "validation", "train_50", "train_100", "train_200", "train_full")


@dataclass(frozen=True)
class DatasetSplit:
    split_name: str
    image_ids: tuple[str, ...]
    seed: Optional[int] = None

    def __len__(self):
        return len(self.image_ids)


def split_by_recency(dataset: Dataset, n_test: int) -> tuple[DatasetSplit, list[str]]:
    """The ``n_test`` most recently captured images form the test split.

    Ties on ``captured_at`` are broken by ``image_id`` (the lexicographically
    larger id counts as more recent), so membership does not depend on input order.
    """
    for img in dataset.images:
        if img.captured_at is None:
            raise SplitError(f"image {img.image_id} has no captured_at timestamp")
    if not 0 <= n_test <= len(dataset.images):
        raise SplitError(f"n_test={n_test} but dataset has {len(dataset.images)} images")
    ranked = sorted(dataset.images, key=lambda im: (im.captured_at, im.image_id), reverse=True)
    test = [im.image_id for im in ranked[:n_test]]
    chosen = set(test)
    remainder = [im.image_id for im in dataset.images if im.image_id not in chosen]
    return DatasetSplit("test", tuple(test)), remainder


def sample_training_subsets(
    remainder: Sequence[str],
    sizes: Sequence[int] = (50, 100, 200),
    n_validation: int = 42,
    seed: int = 0,
) -> dict[str, DatasetSplit]:
    """Seeded validation split plus nested training subsets.

    One permutation of ``remainder`` is drawn: the first ``n_validation`` ids are
    validation, the rest is ``train_full``, and ``train_<n>`` is its first ``n``
    ids, so smaller subsets are always contained in larger ones.
    """
    sizes = sorted(int(s) for s in sizes)
    if len(set(remainder)) != len(remainder):
        raise SplitError("remainder contains duplicate image ids")
    if sizes and sizes[0] < 1:
        raise SplitError(f"training sizes must be positive: {sizes}")
    need = (sizes[-1] if sizes else 0) + n_validation
    if need > len(remainder):
        raise SplitError(
            f"need {need} images (largest subset {sizes[-1] if sizes else 0} + validation {n_validation}) "
            f"but only {len(remainder)} remain"
        )
    rng = np.random.default_rng(seed)
    order = [remainder[i] for i in rng.permutation(len(remainder))]
    val, rest = order[:n_validation], order[n_validation:]
    splits = {"validation": DatasetSplit("validation", tuple(val), seed)}
    for s in sizes:
        splits[f"train_{s}"] = DatasetSplit(f"train_{s}", tuple(rest[:s]), seed)
    splits["train_full"] = DatasetSplit("train_full", tuple(rest), seed)
    return splits


def make_splits(
    dataset: Dataset, n_test: int, sizes: Sequence[int], n_validation: int, seed: int
) -> dict[str, DatasetSplit]:
    test, remainder = split_by_recency(dataset, n_test)
    splits = {"test": test}
    splits.update(sample_training_subsets(remainder, sizes, n_validation, seed))
    return splits


def save_split_manifest(splits: dict[str, DatasetSplit], path, **meta) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        **meta,
        "splits": {k: {"seed": v.seed, "image_ids": list(v.image_ids)} for k, v in splits.items()},
        "counts": {k: len(v) for k, v in splits.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_split_manifest(path) -> dict[str, DatasetSplit]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported split manifest version {doc.get('schema_version')}")
    return {k: DatasetSplit(k, tuple(v["image_ids"]), v.get("seed")) for k, v in doc["splits"].items()}
