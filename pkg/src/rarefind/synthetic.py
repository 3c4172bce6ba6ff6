"""Synthetic seafloor-like imagery with colored-shape "species".

Backgrounds are per-pixel noise (no flat regions, so a flood fill started on
the background finds nothing); each organism is a flat-colored polygon. The
point annotation sits at a pixel that is guaranteed to be inside the shape.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .annotations import (
    AnnotatedImage,
    InstanceAnnotation,
    Point,
    SegmentationBoundary,
    rasterize_polygon,
)
from .datasets import CSV_COLUMNS, Dataset


@dataclass(frozen=True)
class Species:
    label: str
    shape: str
    color: tuple[int, int, int]


def _regular(n, r, phase=0.0):
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _star(points, r_out, r_in):
    t = -np.pi / 2 + np.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, r_out, r_in)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def shape_outline(shape: str, size: float) -> np.ndarray:
    """Polygon centered on the origin with extent roughly ``size``."""
    r = size / 2
    if shape == "circle":
        return _regular(32, r)
    if shape == "square":
        return np.array([[-r, -r], [r, -r], [r, r], [-r, r]]) * 0.85
    if shape == "triangle":
        return _regular(3, r, -np.pi / 2)
    if shape == "diamond":
        return _regular(4, r)
    if shape == "hexagon":
        return _regular(6, r)
    if shape == "bar":
        return np.array([[-r, -0.35 * r], [r, -0.35 * r], [r, 0.35 * r], [-r, 0.35 * r]])
    if shape == "star":
        return _star(5, r, 0.45 * r)
    if shape == "cross":
        a, b = r, 0.35 * r
        return np.array(
            [[-b, -a], [b, -a], [b, -b], [a, -b], [a, b], [b, b], [b, a], [-b, a], [-b, b], [-a, b], [-a, -b], [-b, -b]]
        )
    raise ValueError(f"unknown shape {shape!r}")


BASE_SPECIES = (
    Species("urchin", "circle", (40, 40, 160)),
    Species("sponge", "square", (230, 200, 40)),
    Species("seastar", "triangle", (220, 90, 30)),
    Species("kelp", "bar", (40, 150, 60)),
    Species("anemone", "hexagon", (200, 60, 170)),
    Species("scallop", "diamond", (240, 240, 235)),
)
NOVEL_SPECIES = Species("handfish", "star", (200, 30, 40))


def noisy_background(rng: np.random.Generator, width: int, height: int, amplitude: int = 40) -> np.ndarray:
    base = np.array([80, 110, 120]) + rng.integers(-20, 21, size=3)
    noise = rng.integers(-amplitude, amplitude + 1, size=(height, width, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _place(rng, occupied, size, width, height, margin=1, tries=200):
    half = size / 2
    for _ in range(tries):
        cx = rng.uniform(half + margin, width - half - margin)
        cy = rng.uniform(half + margin, height - half - margin)
        box = (cx - half - 2, cy - half - 2, cx + half + 2, cy + half + 2)
        if all(box[2] <= o[0] or o[2] <= box[0] or box[3] <= o[1] or o[3] <= box[1] for o in occupied):
            occupied.append(box)
            return cx, cy
    return None


def draw_instance(pixels: np.ndarray, species: Species, cx: float, cy: float, size: float, angle: float = 0.0):
    """Paint one organism in place; return its exact outline and a guaranteed-inside point."""
    outline = shape_outline(species.shape, size)
    c, s = math.cos(angle), math.sin(angle)
    rot = outline @ np.array([[c, s], [-s, c]])
    xy = rot + np.array([cx, cy])
    h, w = pixels.shape[:2]
    bits = rasterize_polygon(xy, w, h)
    pixels[bits] = species.color
    r, col = int(cy), int(cx)
    if not bits[r, col]:
        rows, cols = np.nonzero(bits)
        k = np.argmin((rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2)
        r, col = rows[k], cols[k]
    return xy, Point(col + 0.5, r + 0.5), bits


def make_image(
    rng: np.random.Generator,
    image_id: str,
    species: Sequence[Species],
    width: int = 64,
    height: int = 64,
    size_range: tuple[float, float] = (12.0, 20.0),
    captured_at: Optional[datetime] = None,
    distractors: Sequence[Species] = (),
    with_boundaries: bool = False,
) -> AnnotatedImage:
    """One image holding one instance of each entry in ``species``.

    ``distractors`` are drawn but not annotated. With ``with_boundaries`` the
    exact drawn outlines are attached (useful as ground truth).
    """
    pixels = noisy_background(rng, width, height)
    occupied: list = []
    drawn = []
    for sp, annotated in [(sp, True) for sp in species] + [(sp, False) for sp in distractors]:
        size = rng.uniform(*size_range)
        spot = _place(rng, occupied, size, width, height)
        if spot is not None:
            drawn.append((sp, annotated, spot, size, rng.uniform(0, 2 * np.pi)))
    anns = []
    for k, (sp, annotated, (cx, cy), size, angle) in enumerate(drawn):
        xy, pt, _ = draw_instance(pixels, sp, cx, cy, size, angle)
        if not annotated:
            continue
        ann = InstanceAnnotation(id=f"{image_id}/{len(anns)}", class_label=sp.label, point=pt)
        if with_boundaries:
            ann = ann.with_boundary(SegmentationBoundary.from_xy(xy))
        anns.append(ann)
    return AnnotatedImage(
        image_id=image_id,
        width=width,
        height=height,
        captured_at=captured_at,
        annotations=tuple(anns),
        pixels=pixels,
    )


def novel_dataset(
    n_images: int,
    seed: int = 0,
    width: int = 64,
    height: int = 64,
    novel: Species = NOVEL_SPECIES,
    distractors: Sequence[Species] = BASE_SPECIES,
    max_distractors: int = 2,
    start: datetime = datetime(2019, 1, 1),
    name: str = "novel",
    **kw,
) -> Dataset:
    """Images with exactly one novel instance each, plus unannotated base organisms.

    Capture times increase with the image index (one day apart), so the last
    images generated are the most recent.
    """
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n_images):
        k = int(rng.integers(0, max_distractors + 1))
        picks = [distractors[j] for j in rng.choice(len(distractors), size=k, replace=False)] if k else []
        images.append(
            make_image(
                rng, f"{name}-{i:04d}", [novel], width, height,
                captured_at=start + timedelta(days=i), distractors=picks, **kw,
            )
        )
    return Dataset(name, images)


def base_dataset(
    n_images: int,
    seed: int = 0,
    width: int = 64,
    height: int = 64,
    species: Sequence[Species] = BASE_SPECIES,
    per_image: tuple[int, int] = (2, 4),
    start: datetime = datetime(2018, 1, 1),
    name: str = "base",
    **kw,
) -> Dataset:
    """Images with several annotated base-class organisms each."""
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n_images):
        k = int(rng.integers(per_image[0], per_image[1] + 1))
        picks = [species[j] for j in rng.choice(len(species), size=min(k, len(species)), replace=False)]
        images.append(
            make_image(rng, f"{name}-{i:04d}", picks, width, height, captured_at=start + timedelta(hours=i), **kw)
        )
    return Dataset(name, images)


def write_point_export(dataset: Dataset, root) -> Path:
    """Write PNGs plus a point CSV in the ingest schema; returns the CSV path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    csv_path = root / f"{dataset.name}_points.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for img in dataset.images:
            rel = f"images/{img.image_id}.png"
            Image.fromarray(img.pixels).save(root / rel)
            for ann in img.annotations:
                writer.writerow(
                    {
                        "image_path": rel,
                        "image_id": img.image_id,
                        "captured_at": img.captured_at.isoformat(),
                        "class_label": ann.class_label,
                        "point_x": ann.point.x,
                        "point_y": ann.point.y,
                        "image_width": img.width,
                        "image_height": img.height,
                    }
                )
    return csv_path
