"""Pre-training on base classes and fine-tuning on the novel class."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .. import __version__
from ..annotations import AnnotatedImage, BoundingBox
from ..augment import (
    AugmentationConfig,
    AugmentedSample,
    _map_annotation,
    clip_annotation,
    make_training_sample,
    random_flip,
    sample_rng,
)
from ..datasets import Dataset
from .backend import DetectorBackend, Target, build_backend, image_tensor
from .schedule import TrainingSchedule, lr_at

log = logging.getLogger(__name__)

ARTIFACT_ROOT_ENV = "RAREFIND_ARTIFACTS"


class TrainConfigError(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, iteration: int, checkpoint: "Checkpoint"):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainRunConfig:
    mode: str
    schedule: TrainingSchedule
    frozen_stages: tuple[int, ...] = ()
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    resize_shorter_side: Optional[int] = 1000
    seed: int = 0
    backend: str = "toy_centernet"
    backend_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise TrainConfigError(f"mode must be 'pretrain' or 'finetune', got {self.mode!r}")
        object.__setattr__(self, "frozen_stages", tuple(sorted(int(s) for s in self.frozen_stages)))
        if self.mode == "pretrain" and self.frozen_stages:
            raise TrainConfigError("pre-training updates every stage; frozen_stages must be empty")
        if any(s < 1 for s in self.frozen_stages):
            raise TrainConfigError(f"stage indices start at 1: {self.frozen_stages}")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "schedule": self.schedule.to_json(),
            "frozen_stages": list(self.frozen_stages),
            "augmentation": self.augmentation.to_json(),
            "resize_shorter_side": self.resize_shorter_side,
            "seed": self.seed,
            "backend": self.backend,
            "backend_options": dict(self.backend_options),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainRunConfig":
        return cls(
            mode=d["mode"],
            schedule=TrainingSchedule.from_json(d["schedule"]),
            frozen_stages=tuple(d.get("frozen_stages", ())),
            augmentation=AugmentationConfig.from_json(d.get("augmentation", {})),
            resize_shorter_side=d.get("resize_shorter_side"),
            seed=int(d.get("seed", 0)),
            backend=d.get("backend", "toy_centernet"),
            backend_options=dict(d.get("backend_options", {})),
        )


def resize_shorter_side(image: AnnotatedImage, target: Optional[int]) -> AnnotatedImage:
    """Scale so the shorter side equals ``target``; geometry uses the exact factor.

    Pixel dimensions are rounded, so geometry touching the far edge is clipped
    to the rounded raster.
    """
    if target is None:
        return image
    short = min(image.width, image.height)
    if short == target:
        return image
    f = target / short
    W, H = max(1, round(image.width * f)), max(1, round(image.height * f))
    pixels = None
    if image.pixels is not None:
        pixels = np.asarray(Image.fromarray(image.pixels).resize((W, H), Image.BILINEAR))
    anns = []
    for a in image.annotations:
        scaled = _map_annotation(a, lambda x: x * f, lambda y: y * f)
        scaled = clip_annotation(scaled, 0, 0, W, H)
        if scaled is not None:
            anns.append(scaled)
    return replace(image, width=W, height=H, pixels=pixels, annotations=tuple(anns))


def trainable_images(images: Sequence[AnnotatedImage], classes: Optional[Sequence[str]] = None) -> list[AnnotatedImage]:
    """Images with pixels and at least one boxed annotation; failed segmentations are dropped."""
    out = []
    for img in images:
        anns = tuple(a for a in img.annotations if a.bbox is not None)
        if img.pixels is None or not anns:
            continue
        if classes is not None and not any(a.class_label in classes for a in anns):
            continue
        out.append(replace(img, annotations=anns))
    return out


def target_for(image: AnnotatedImage) -> Target:
    anns = [a for a in image.annotations if a.bbox is not None]
    boxes = np.array([a.bbox.as_tuple() for a in anns], dtype=np.float64).reshape(-1, 4)
    return Target(boxes, tuple(a.class_label for a in anns))


# --- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    model: DetectorBackend
    metadata: dict

    @property
    def classes(self) -> list[str]:
        return list(self.model.classes)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.model.state_dict(), buf)
        (directory / "model.pt").write_bytes(buf.getvalue())
        meta = {
            **self.metadata,
            "backend": self.model.config(),
            "stage_tags": self.model.stage_tags(),
            "classes": self.classes,
            "framework": {"rarefind": __version__, "torch": torch.__version__},
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        cfg = dict(meta["backend"])
        name, classes = cfg.pop("name"), cfg.pop("classes")
        model = build_backend(name, classes, **cfg)
        state = torch.load(directory / "model.pt", weights_only=True)
        model.load_state_dict(state)
        if model.stage_tags() != meta["stage_tags"]:
            raise TrainConfigError(f"{directory}: stage tags do not match backend {name}")
        return cls(model, meta)


# --- training loop ---------------------------------------------------------------


@dataclass
class RunLog:
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def write(self, directory) -> None:
        directory = Path(directory)
        with (directory / "trace.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "lr"])
            for it, loss, lr in self.trace:
                w.writerow([it, repr(loss), repr(lr)])
        with (directory / "provenance.jsonl").open("w") as fh:
            for p in self.provenance:
                fh.write(json.dumps(p, sort_keys=True) + "\n")

    @staticmethod
    def read_trace(directory) -> list[tuple[int, float, float]]:
        with (Path(directory) / "trace.csv").open() as fh:
            return [(int(r["iteration"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(fh)]


def _freeze(model: DetectorBackend, frozen_stages: Sequence[int]) -> list[torch.nn.Parameter]:
    groups = model.parameter_groups()
    n = model.num_stages
    bad = [s for s in frozen_stages if s > n]
    if bad:
        raise TrainConfigError(f"backend {model.name} has {n} stages; cannot freeze {bad}")
    frozen_names = {f"stage{s}" for s in frozen_stages}
    trainable = []
    for gname, params in groups.items():
        for _, p in params:
            p.requires_grad_(gname not in frozen_names)
            if gname not in frozen_names:
                trainable.append(p)
    return trainable


def train_loop(
    model: DetectorBackend,
    draw_sample: Callable[[int], AugmentedSample],
    schedule: TrainingSchedule,
    frozen_stages: Sequence[int],
    seed: int,
    metadata: Optional[dict] = None,
    on_iteration: Optional[Callable[[int, float, float], None]] = None,
) -> RunLog:
    """SGD with momentum and weight decay under ``schedule``; frozen stages never see an update.

    ``draw_sample(k)`` returns the k-th training sample of the run, so the data
    stream depends only on the seed it closes over.
    """
    torch.manual_seed(seed)
    params = _freeze(model, frozen_stages)
    opt = torch.optim.SGD(params, lr=lr_at(schedule, 0), momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    runlog = RunLog()
    model.train()
    for it in range(schedule.total_iterations):
        lr = lr_at(schedule, it)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = 0.0
        for b in range(schedule.batch_size):
            k = it * schedule.batch_size + b
            sample = draw_sample(k)
            runlog.provenance.append({"k": k, **sample.provenance, "digest": sample.digest()})
            loss = loss + model.loss(image_tensor(sample.pixels), target_for(sample.image)) / schedule.batch_size
        value = float(loss.detach())
        if not math.isfinite(value):
            model.eval()
            raise NonFiniteLoss(it, Checkpoint(model, {**(metadata or {}), "iteration": it, "aborted": True}))
        opt.zero_grad()
        loss.backward()
        opt.step()
        runlog.trace.append((it, value, lr))
        if on_iteration is not None:
            on_iteration(it, value, lr)
    model.eval()
    return runlog


def _prepare(images: Sequence[AnnotatedImage], size: Optional[int]) -> list[AnnotatedImage]:
    return [resize_shorter_side(img, size) for img in images]


def pretrain(base_dataset: Dataset, config: TrainRunConfig, model: Optional[DetectorBackend] = None):
    """Train every stage of a fresh detector on the base classes.

    Returns ``(checkpoint, run_log)``. Flips are the only augmentation.
    """
    if config.mode != "pretrain":
        raise TrainConfigError(f"pretrain needs mode='pretrain', got {config.mode!r}")
    pool = trainable_images(_prepare(base_dataset.images, config.resize_shorter_side))
    if not pool:
        raise TrainConfigError(f"dataset {base_dataset.name} has no images with usable boxes")
    classes = sorted({a.class_label for img in pool for a in img.annotations})
    if model is None:
        model = build_backend(config.backend, classes, seed=config.seed, **config.backend_options)
    elif list(model.classes) != classes:
        model.replace_head(classes, torch.Generator().manual_seed(config.seed))

    def draw(k):
        rng = sample_rng(config.seed, k)
        img = pool[int(rng.integers(len(pool)))]
        img, flips = random_flip(img, rng, config.augmentation.flip_probability)
        return AugmentedSample(img, {"image": img.image_id, "flips": flips})

    meta = {"phase": "pretrain", "config": config.to_json(), "base_dataset": base_dataset.name}
    runlog = train_loop(model, draw, config.schedule, (), config.seed, meta)
    meta["iteration"] = config.schedule.total_iterations
    return Checkpoint(model, meta), runlog


def finetune(
    checkpoint: Optional[Checkpoint],
    novel_dataset: Dataset,
    base_dataset: Optional[Dataset],
    config: TrainRunConfig,
    novel_class: Optional[str] = None,
):
    """Replace the head with a single novel-class head and train the unfrozen stages.

    With ``checkpoint=None`` training starts from a freshly initialised backend
    (the no-pre-training ablation). Returns ``(checkpoint, run_log)`` holding the
    final-iteration model.
    """
    if config.mode != "finetune":
        raise TrainConfigError(f"finetune needs mode='finetune', got {config.mode!r}")
    aug = config.augmentation
    if aug.copy_paste_enabled and (base_dataset is None or not base_dataset.images):
        raise TrainConfigError("copy-paste is enabled but no base dataset was given")
    labels = sorted({a.class_label for img in novel_dataset.images for a in img.annotations})
    if novel_class is None:
        if len(labels) != 1:
            raise TrainConfigError(f"novel dataset must hold exactly one class, found {labels}")
        novel_class = labels[0]

    if checkpoint is None:
        model = build_backend(config.backend, [novel_class], seed=config.seed, **config.backend_options)
        source = None
    else:
        model = copy.deepcopy(checkpoint.model)
        if checkpoint.metadata.get("classes", model.classes) != list(model.classes):
            raise TrainConfigError("checkpoint head does not match its recorded class vocabulary")
        if model.name != config.backend:
            raise TrainConfigError(f"checkpoint backend {model.name!r} != configured {config.backend!r}")
        source = checkpoint.metadata.get("phase")
    model.replace_head([novel_class], torch.Generator().manual_seed(config.seed + 7919))

    novel_pool = trainable_images(_prepare(novel_dataset.images, config.resize_shorter_side), [novel_class])
    if not novel_pool:
        raise TrainConfigError(f"no usable {novel_class!r} boxes in {novel_dataset.name}")
    # the novel pool keeps only novel-class boxes; base pool keeps base boxes with boundaries
    novel_pool = [img.replace_annotations(a for a in img.annotations if a.class_label == novel_class) for img in novel_pool]
    base_pool = []
    if base_dataset is not None and aug.copy_paste_enabled:
        base_pool = [
            img.replace_annotations(a for a in img.annotations if a.class_label != novel_class)
            for img in trainable_images(_prepare(base_dataset.images, config.resize_shorter_side))
        ]

    def draw(k):
        return make_training_sample(novel_pool, base_pool, aug, sample_rng(config.seed, k))

    meta = {"phase": "finetune", "config": config.to_json(), "novel_dataset": novel_dataset.name, "source": source}
    runlog = train_loop(model, draw, config.schedule, config.frozen_stages, config.seed, meta)
    meta["iteration"] = config.schedule.total_iterations
    return Checkpoint(model, meta), runlog


def detect_images(model: DetectorBackend, images: Sequence[AnnotatedImage], resize: Optional[int], max_detections=20):
    """Run the detector and map boxes back to each image's original coordinates."""
    from ..evaluation import Detection

    out = []
    model.eval()
    for img in images:
        scaled = resize_shorter_side(replace(img, annotations=()), resize)
        inv = 1.0 if resize is None else min(img.width, img.height) / resize
        for d in model.detect(image_tensor(scaled.pixels), max_detections=max_detections):
            x0, y0, x1, y1 = d.box
            x1, y1 = min(x1 * inv, img.width), min(y1 * inv, img.height)
            if x1 <= x0 * inv or y1 <= y0 * inv:
                continue
            box = BoundingBox(x0 * inv, y0 * inv, x1, y1)
            out.append(Detection(img.image_id, box, min(1.0, max(0.0, d.confidence)), d.class_label))
    return out


def artifact_root(default="artifacts") -> Path:
    return Path(os.environ.get(ARTIFACT_ROOT_ENV, default))
