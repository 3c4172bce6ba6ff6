"""Seeded flips, novel-preserving crops and two-way copy-paste.

Everything here is a pure function of its inputs and a ``numpy.random.Generator``.
Per-sample generators come from :func:`sample_rng`, so a stream of samples is
the same no matter how many workers produce it or in what order.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .annotations import (
    AnnotatedImage,
    BoundingBox,
    GeometryError,
    InstanceAnnotation,
    Point,
    SegmentationBoundary,
    bbox_from_mask,
    bbox_raster,
    clip_bbox,
    clip_boundary,
    rasterize_polygon,
)


class MaskMode(str, enum.Enum):
    NONE = "none"
    BOUNDING_BOX = "bounding_box"
    SEGMENTATION = "segmentation"


class AugmentationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    copy_paste_enabled: bool = False
    novel_mask_mode: MaskMode = MaskMode.NONE
    base_mask_mode: MaskMode = MaskMode.NONE
    apply_probability: float = 0.5
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    occlusion_keep_threshold: float = 0.1
    flip_probability: float = 0.5
    paste_random_subset: bool = False

    def __post_init__(self):
        object.__setattr__(self, "novel_mask_mode", MaskMode(self.novel_mask_mode))
        object.__setattr__(self, "base_mask_mode", MaskMode(self.base_mask_mode))
        object.__setattr__(self, "crop_scale_range", tuple(float(v) for v in self.crop_scale_range))
        for name in ("apply_probability", "occlusion_keep_threshold", "flip_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentationConfigError(f"{name}={v} outside [0, 1]")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise AugmentationConfigError(f"crop_scale_range {self.crop_scale_range} must satisfy 0 < low <= high <= 1")
        if self.base_mask_mode == MaskMode.BOUNDING_BOX:
            raise AugmentationConfigError("base classes are pasted with segmentation masks or not at all")
        if self.copy_paste_enabled and self.novel_mask_mode == MaskMode.NONE and self.base_mask_mode == MaskMode.NONE:
            raise AugmentationConfigError("copy-paste enabled but both mask modes are 'none': nothing to paste")

    @property
    def directions(self) -> tuple[str, ...]:
        out = []
        if self.novel_mask_mode != MaskMode.NONE:
            out.append("novel_to_base")
        if self.base_mask_mode != MaskMode.NONE:
            out.append("base_to_novel")
        return tuple(out)

    def to_json(self) -> dict:
        return {
            "copy_paste_enabled": self.copy_paste_enabled,
            "novel_mask_mode": self.novel_mask_mode.value,
            "base_mask_mode": self.base_mask_mode.value,
            "apply_probability": self.apply_probability,
            "crop_scale_range": list(self.crop_scale_range),
            "occlusion_keep_threshold": self.occlusion_keep_threshold,
            "flip_probability": self.flip_probability,
            "paste_random_subset": self.paste_random_subset,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AugmentationConfig":
        d = dict(d)
        if "crop_scale_range" in d:
            d["crop_scale_range"] = tuple(d["crop_scale_range"])
        return cls(**d)

    @classmethod
    def from_modes(cls, novel_mask_mode, base_mask_mode, **kw) -> "AugmentationConfig":
        """Config for one copy-paste row of the ablation grid; ``none/none`` disables pasting."""
        novel_mask_mode, base_mask_mode = MaskMode(novel_mask_mode), MaskMode(base_mask_mode)
        enabled = not (novel_mask_mode == MaskMode.NONE and base_mask_mode == MaskMode.NONE)
        return cls(copy_paste_enabled=enabled, novel_mask_mode=novel_mask_mode, base_mask_mode=base_mask_mode, **kw)


@dataclass(frozen=True)
class AugmentedSample:
    image: AnnotatedImage
    provenance: dict = field(default_factory=dict)

    @property
    def pixels(self) -> np.ndarray:
        return self.image.pixels

    @property
    def annotations(self) -> tuple[InstanceAnnotation, ...]:
        return self.image.annotations

    def to_bytes(self) -> bytes:
        """Canonical serialization used for determinism checks and provenance hashes."""
        anns = [
            {
                "id": a.id,
                "class_label": a.class_label,
                "point": [a.point.x, a.point.y],
                "boundary": None if a.boundary is None else a.boundary.to_list(),
                "bbox": None if a.bbox is None else list(a.bbox.as_tuple()),
            }
            for a in self.image.annotations
        ]
        meta = json.dumps(
            {"image_id": self.image.image_id, "size": [self.image.width, self.image.height], "annotations": anns,
             "provenance": self.provenance},
            sort_keys=True,
        ).encode()
        return meta + b"\0" + np.ascontiguousarray(self.image.pixels).tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def sample_rng(master_seed: int, sample_index: int) -> np.random.Generator:
    """Independent generator for one sample, derived from the master seed and the sample's index."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(sample_index)]))


# --- geometry transforms -----------------------------------------------------


def _map_annotation(ann: InstanceAnnotation, fx, fy) -> InstanceAnnotation:
    """Apply coordinate maps ``fx``/``fy`` (vectorised) to every piece of geometry."""
    point = Point(float(fx(np.array([ann.point.x]))[0]), float(fy(np.array([ann.point.y]))[0]))
    boundary = None
    if ann.boundary is not None:
        xy = ann.boundary.to_array()
        boundary = SegmentationBoundary.from_xy(np.stack([fx(xy[:, 0]), fy(xy[:, 1])], axis=1))
    bbox = None
    if ann.bbox is not None:
        xs = fx(np.array([ann.bbox.x_min, ann.bbox.x_max]))
        ys = fy(np.array([ann.bbox.y_min, ann.bbox.y_max]))
        bbox = BoundingBox(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
    return replace(ann, point=point, boundary=boundary, bbox=bbox)


def flip_image(image: AnnotatedImage, horizontal: bool = False, vertical: bool = False) -> AnnotatedImage:
    if not (horizontal or vertical):
        return image
    W, H = image.width, image.height
    fx = (lambda x: W - x) if horizontal else (lambda x: x)
    fy = (lambda y: H - y) if vertical else (lambda y: y)
    pixels = image.pixels
    if pixels is not None:
        if horizontal:
            pixels = pixels[:, ::-1]
        if vertical:
            pixels = pixels[::-1]
        pixels = np.ascontiguousarray(pixels)
    return replace(image, pixels=pixels, annotations=tuple(_map_annotation(a, fx, fy) for a in image.annotations))


def random_flip(image: AnnotatedImage, rng: np.random.Generator, flip_probability: float = 0.5):
    """Independently mirror each axis with ``flip_probability``; returns ``(image, flips)``."""
    h = bool(rng.random() < flip_probability)
    v = bool(rng.random() < flip_probability)
    return flip_image(image, horizontal=h, vertical=v), {"horizontal": h, "vertical": v}


def _nearest_point(ann_point: Point, bits: np.ndarray) -> Point:
    rows, cols = np.nonzero(bits)
    k = int(np.argmin((cols + 0.5 - ann_point.x) ** 2 + (rows + 0.5 - ann_point.y) ** 2))
    return Point(cols[k] + 0.5, rows[k] + 0.5)


def clip_annotation(ann: InstanceAnnotation, x0, y0, x1, y1) -> Optional[InstanceAnnotation]:
    """Clip geometry to a rectangle; ``None`` when nothing of the instance is left inside."""
    if ann.boundary is not None:
        b = clip_boundary(ann.boundary, x0, y0, x1, y1)
        if b is None:
            return None
        new = ann.with_boundary(b)
    elif ann.bbox is not None:
        bb = clip_bbox(ann.bbox, x0, y0, x1, y1)
        if bb is None:
            return None
        new = replace(ann, bbox=bb)
    else:
        if not (x0 <= ann.point.x <= x1 and y0 <= ann.point.y <= y1):
            return None
        return ann
    p = ann.point
    box = new.bbox
    if not (box.x_min <= p.x <= box.x_max and box.y_min <= p.y <= box.y_max):
        p = Point(min(max(p.x, box.x_min), box.x_max), min(max(p.y, box.y_min), box.y_max))
    return replace(new, point=p)


def _resize_pixels(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    if pixels.shape[1] == width and pixels.shape[0] == height:
        return pixels
    return np.asarray(Image.fromarray(pixels).resize((width, height), Image.NEAREST))


def scale_image(image: AnnotatedImage, width: int, height: int) -> AnnotatedImage:
    """Resample to ``width x height`` (nearest neighbour) and scale geometry per axis."""
    if (width, height) == (image.width, image.height):
        return image
    sx, sy = width / image.width, height / image.height
    pixels = None if image.pixels is None else _resize_pixels(image.pixels, width, height)
    anns = tuple(_map_annotation(a, lambda x: x * sx, lambda y: y * sy) for a in image.annotations)
    return replace(image, width=width, height=height, pixels=pixels, annotations=anns)


@dataclass(frozen=True)
class CropWindow:
    x: int
    y: int
    width: int
    height: int

    def as_list(self):
        return [self.x, self.y, self.width, self.height]


def constrained_random_crop(
    image: AnnotatedImage,
    must_keep: Sequence[str],
    rng: np.random.Generator,
    crop_scale_range: tuple[float, float] = (0.5, 1.0),
    output_size: Optional[tuple[int, int]] = None,
) -> tuple[AnnotatedImage, CropWindow]:
    """Random integer crop that fully contains every ``must_keep`` box.

    The scale is drawn uniformly from ``crop_scale_range`` (same on both axes)
    and raised to the smallest scale that can hold the kept boxes. Among the
    windows of that size that contain them, one is picked uniformly. If even a
    full-scale window cannot hold them the crop is the identity. Annotations
    left entirely outside are dropped; with ``output_size`` the crop is resized
    back up (so cropping changes object scale).
    """
    W, H = image.width, image.height
    keep = [image.annotation(i) for i in must_keep]
    boxes = [a.bbox for a in keep if a.bbox is not None]
    lo, hi = crop_scale_range
    s = float(rng.uniform(lo, hi)) if hi > lo else float(hi)
    cw, ch = max(1, round(s * W)), max(1, round(s * H))
    if boxes:
        ux0 = math.floor(min(b.x_min for b in boxes))
        uy0 = math.floor(min(b.y_min for b in boxes))
        ux1 = math.ceil(max(b.x_max for b in boxes))
        uy1 = math.ceil(max(b.y_max for b in boxes))
        need = max((ux1 - ux0) / W, (uy1 - uy0) / H)
        if need > hi:
            window = CropWindow(0, 0, W, H)
            return image, window
        if need > s:
            s = need
            cw, ch = max(ux1 - ux0, round(s * W)), max(uy1 - uy0, round(s * H))
            cw, ch = min(cw, W), min(ch, H)
        x_lo, x_hi = max(0, ux1 - cw), min(ux0, W - cw)
        y_lo, y_hi = max(0, uy1 - ch), min(uy0, H - ch)
    else:
        x_lo, x_hi, y_lo, y_hi = 0, W - cw, 0, H - ch
    x = int(rng.integers(x_lo, x_hi + 1))
    y = int(rng.integers(y_lo, y_hi + 1))
    window = CropWindow(x, y, cw, ch)
    if (x, y, cw, ch) == (0, 0, W, H):
        return image, window

    anns = []
    for ann in image.annotations:
        shifted = _map_annotation(ann, lambda v: v - x, lambda v: v - y)
        clipped = clip_annotation(shifted, 0, 0, cw, ch)
        if clipped is not None:
            anns.append(clipped)
    pixels = None if image.pixels is None else np.ascontiguousarray(image.pixels[y : y + ch, x : x + cw])
    out = replace(image, width=cw, height=ch, pixels=pixels, annotations=tuple(anns))
    if output_size is not None:
        out = scale_image(out, *output_size)
    return out, window


# --- copy-paste ----------------------------------------------------------------


def paste_mask(ann: InstanceAnnotation, mode: MaskMode, width: int, height: int) -> Optional[np.ndarray]:
    """Pixels a pasted instance would overwrite in a ``width x height`` target, or ``None``."""
    if mode == MaskMode.SEGMENTATION:
        if ann.boundary is None:
            raise GeometryError(f"annotation {ann.id} has no boundary for segmentation paste")
        bits = rasterize_polygon(ann.boundary.to_array(), width, height)
    elif mode == MaskMode.BOUNDING_BOX:
        if ann.bbox is None:
            raise GeometryError(f"annotation {ann.id} has no bbox for bounding-box paste")
        bits = bbox_raster(ann.bbox, width, height)
    else:
        raise AugmentationConfigError("cannot paste with mask mode 'none'")
    return bits if bits.any() else None


def _placed(source: AnnotatedImage, ann: InstanceAnnotation, mode: MaskMode, W: int, H: int):
    """Source annotation clipped to the shared extent, and its paste mask in a W x H target."""
    clipped = clip_annotation(ann, 0, 0, min(W, source.width), min(H, source.height))
    bits = None if clipped is None or clipped.bbox is None else paste_mask(clipped, mode, W, H)
    return clipped, bits


def paste_instances(
    target: AnnotatedImage,
    source: AnnotatedImage,
    instance_ids: Sequence[str],
    mask_mode: MaskMode,
    occlusion_keep_threshold: float = 0.1,
) -> AugmentedSample:
    """Copy the selected source instances onto ``target`` at the same coordinates.

    Target pixels under each instance's mask become the source pixels; nothing
    is blended. Target annotations that keep less than
    ``occlusion_keep_threshold`` of their area are dropped, partly covered ones
    get a bbox around what is still visible (and lose their boundary).
    """
    mask_mode = MaskMode(mask_mode)
    W, H = target.width, target.height
    pixels = target.pixels.copy()
    covered = np.zeros((H, W), dtype=bool)
    pasted, skipped = [], []
    for ann_id in instance_ids:
        ann = source.annotation(ann_id)
        clipped, bits = _placed(source, ann, mask_mode, W, H)
        if bits is None:
            skipped.append(ann_id)
            continue
        pixels[bits] = source.pixels[: H, : W][bits]
        covered |= bits
        pasted.append(replace(clipped, id=f"paste:{source.image_id}:{ann.id}", point=_nearest_point(clipped.point, bits)))

    kept, dropped = [], []
    for ann in target.annotations:
        try:
            orig = ann.mask(W, H).bits
        except GeometryError:
            # point-only annotation: survives iff its pixel is still visible
            r, c = min(int(ann.point.y), H - 1), min(int(ann.point.x), W - 1)
            (dropped if covered[r, c] else kept).append(ann if not covered[r, c] else ann.id)
            continue
        visible = orig & ~covered
        frac = visible.sum() / orig.sum()
        if frac < occlusion_keep_threshold or not visible.any():
            dropped.append(ann.id)
        elif frac < 1.0:
            kept.append(replace(ann, boundary=None, corrected=False, bbox=bbox_from_mask(visible),
                                point=_nearest_point(ann.point, visible)))
        else:
            kept.append(ann)

    image = replace(target, pixels=pixels, annotations=tuple(kept + pasted))
    prov = {
        "target": target.image_id,
        "source": source.image_id,
        "mask_mode": mask_mode.value,
        "pasted": [a.id for a in pasted],
        "skipped": skipped,
        "dropped": dropped,
    }
    return AugmentedSample(image, prov)


def _trainable(ann: InstanceAnnotation) -> bool:
    return ann.bbox is not None


def make_training_sample(
    novel_pool: Sequence[AnnotatedImage],
    base_pool: Sequence[AnnotatedImage],
    config: AugmentationConfig,
    rng: np.random.Generator,
) -> AugmentedSample:
    """Draw one fine-tuning sample.

    Without copy-paste (or with probability ``1 - apply_probability``) this is
    just a flipped novel image. Otherwise a novel and a base image are drawn,
    the novel one is cropped around its novel instances, then either the novel
    instances go onto the base image or the base instances onto the novel
    image, and the composite is flipped.
    """
    if not novel_pool:
        raise AugmentationConfigError("novel pool is empty")
    prov: dict = {"direction": None}
    if not config.copy_paste_enabled or rng.random() >= config.apply_probability:
        novel = novel_pool[int(rng.integers(len(novel_pool)))]
        prov["novel_image"] = novel.image_id
        image = novel
    else:
        if not base_pool:
            raise AugmentationConfigError("copy-paste enabled but base pool is empty")
        novel = novel_pool[int(rng.integers(len(novel_pool)))]
        base = base_pool[int(rng.integers(len(base_pool)))]
        dirs = config.directions
        direction = dirs[int(rng.integers(len(dirs)))]
        keep = [a.id for a in novel.annotations if _trainable(a)]
        cropped, window = constrained_random_crop(
            novel, keep, rng, config.crop_scale_range, output_size=(novel.width, novel.height)
        )
        if direction == "base_to_novel":
            target, source, mode = cropped, base, config.base_mask_mode
        else:
            target, source, mode = base, cropped, config.novel_mask_mode
        candidates = [
            a.id for a in source.annotations
            if _trainable(a) and (mode != MaskMode.SEGMENTATION or a.boundary is not None)
        ]
        if config.paste_random_subset and candidates:
            k = int(rng.integers(1, len(candidates) + 1))
            picked = sorted(rng.choice(len(candidates), size=k, replace=False).tolist())
            candidates = [candidates[i] for i in picked]
        protected = []
        if direction == "base_to_novel":
            # base instances may not cover the novel instance: it is the only positive in the sample
            W, H = target.width, target.height
            novel_bits = np.zeros((H, W), dtype=bool)
            for a in target.annotations:
                if _trainable(a):
                    novel_bits |= bbox_raster(a.bbox, W, H)
            clear = []
            for ann_id in candidates:
                _, bits = _placed(source, source.annotation(ann_id), mode, W, H)
                (protected if bits is not None and (bits & novel_bits).any() else clear).append(ann_id)
            candidates = clear
        sample = paste_instances(target, source, candidates, mode, config.occlusion_keep_threshold)
        image = replace(sample.image, image_id=f"{target.image_id}+{source.image_id}")
        prov.update(
            novel_image=novel.image_id,
            base_image=base.image_id,
            direction=direction,
            crop_window=window.as_list(),
            **{k: v for k, v in sample.provenance.items() if k not in ("target", "source")},
        )
        if direction == "base_to_novel":
            prov["protected_skipped"] = protected
    image, flips = random_flip(image, rng, config.flip_probability)
    prov["flips"] = flips
    return AugmentedSample(image, prov)


def generate_samples(
    novel_pool: Sequence[AnnotatedImage],
    base_pool: Sequence[AnnotatedImage],
    config: AugmentationConfig,
    master_seed: int,
    indices: Sequence[int],
    workers: int = 1,
) -> list[AugmentedSample]:
    """Samples for ``indices`` in order; ``workers`` only changes who computes which index."""

    def one(i):
        s = make_training_sample(novel_pool, base_pool, config, sample_rng(master_seed, i))
        return AugmentedSample(s.image, {**s.provenance, "sample_index": int(i), "master_seed": int(master_seed)})

    if workers <= 1:
        return [one(i) for i in indices]
    shards = [list(indices[w::workers]) for w in range(workers)]
    with ThreadPoolExecutor(workers) as pool:
        results = list(pool.map(lambda shard: [(i, one(i)) for i in shard], shards))
    by_index = {i: s for shard in results for i, s in shard}
    return [by_index[i] for i in indices]


def write_preview(samples: Sequence[AugmentedSample], out_dir) -> list[Path]:
    """PNG per sample with boxes drawn (pasted instances in yellow) plus its provenance JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, s in enumerate(samples):
        im = Image.fromarray(s.pixels)
        draw = ImageDraw.Draw(im)
        for a in s.annotations:
            if a.bbox is None:
                continue
            color = (255, 230, 0) if a.id.startswith("paste:") else (0, 255, 0)
            draw.rectangle([a.bbox.x_min, a.bbox.y_min, a.bbox.x_max - 1, a.bbox.y_max - 1], outline=color)
        stem = f"sample_{k:04d}"
        im.save(out_dir / f"{stem}.png")
        prov = {**s.provenance, "digest": s.digest(), "annotations": [a.id for a in s.annotations]}
        (out_dir / f"{stem}.json").write_text(json.dumps(prov, indent=1, sort_keys=True))
        written.append(out_dir / f"{stem}.png")
    return written
