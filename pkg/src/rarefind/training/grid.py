"""Ablation grid: (pretrain) x (novel mask, base mask) x sample size x backend x seed.

Every run lives in a directory named by a hash of its full configuration, so
re-running a grid skips finished runs and a changed config never reuses stale
artifacts. Pre-training depends only on (backend, seed, base data), so one
pre-trained checkpoint serves every pretrain=Y cell for that pair.
"""

from __future__ import annotations

import hashlib
import json
import logging
import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from ..augment import AugmentationConfig
from ..datasets import Dataset, DatasetSplit
from ..evaluation import (
    CellKey,
    EvalResult,
    TABLE_ROWS,
    evaluate_ap,
    ground_truth_from_images,
    read_detections,
    write_detections,
)
from .trainer import Checkpoint, TrainRunConfig, detect_images, finetune, pretrain

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    rows: tuple[tuple[bool, str, str], ...] = TABLE_ROWS
    sample_sizes: tuple[int, ...] = (50, 100, 200)
    backends: tuple[str, ...] = ("toy_centernet", "toy_wide")

    def cells(self) -> list[CellKey]:
        return [
            CellKey(pre, novel, base, size, backend)
            for pre, novel, base in self.rows
            for backend in self.backends
            for size in self.sample_sizes
        ]

    def to_json(self) -> dict:
        return {"rows": [list(r) for r in self.rows], "sample_sizes": list(self.sample_sizes), "backends": list(self.backends)}

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(
            rows=tuple((bool(r[0]), r[1], r[2]) for r in d.get("rows", TABLE_ROWS)),
            sample_sizes=tuple(int(s) for s in d.get("sample_sizes", (50, 100, 200))),
            backends=tuple(d.get("backends", ("toy_centernet", "toy_wide"))),
        )


def plan_grid(grid: GridSpec, seeds: Sequence[int]) -> list[tuple[CellKey, int]]:
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"seeds must be distinct: {list(seeds)}")
    return [(cell, seed) for cell in grid.cells() for seed in seeds]


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunArtifact:
    key: CellKey
    seed: int
    directory: Path
    status: str
    ap: Optional[float] = None
    error: Optional[str] = None

    @classmethod
    def load(cls, directory) -> "RunArtifact":
        directory = Path(directory)
        d = json.loads((directory / "result.json").read_text())
        return cls(CellKey.from_json(d["cell"]), int(d["seed"]), directory, d["status"], d.get("ap"), d.get("error"))

    def save(self) -> None:
        doc = {"cell": self.key.to_json(), "seed": self.seed, "status": self.status, "ap": self.ap, "error": self.error}
        (self.directory / "result.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def cell_finetune_config(template: TrainRunConfig, cell: CellKey, seed: int) -> TrainRunConfig:
    aug = template.augmentation.to_json()
    for k in ("copy_paste_enabled", "novel_mask_mode", "base_mask_mode"):
        aug.pop(k)
    return replace(
        template,
        backend=cell.backend,
        seed=seed,
        augmentation=AugmentationConfig.from_modes(cell.novel_mask_mode, cell.base_mask_mode, **aug),
    )


def _dataset_fingerprint(ds: Dataset) -> dict:
    return {"name": ds.name, "n": len(ds.images), "ids": config_hash([i.image_id for i in ds.images])}


def run_pretrain_cached(base: Dataset, config: TrainRunConfig, root) -> Checkpoint:
    spec = {"pretrain": config.to_json(), "base": _dataset_fingerprint(base)}
    directory = Path(root) / "pretrain" / config_hash(spec)
    if (directory / "DONE").exists():
        return Checkpoint.load(directory / "checkpoint")
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(spec, indent=1, sort_keys=True))
    ckpt, runlog = pretrain(base, config)
    ckpt.save(directory / "checkpoint")
    runlog.write(directory)
    (directory / "DONE").write_text("")
    return ckpt


def run_experiment_grid(
    grid: GridSpec,
    seeds: Sequence[int],
    novel: Dataset,
    base: Dataset,
    splits: dict[str, DatasetSplit],
    pretrain_template: TrainRunConfig,
    finetune_template: TrainRunConfig,
    root,
    novel_class: Optional[str] = None,
    save_checkpoints: bool = True,
    config_echo: Optional[str] = None,
) -> list[RunArtifact]:
    """Train and evaluate every (cell, seed); failures are recorded, not raised.

    ``config_echo`` (the user's config file text) is copied verbatim into each
    run directory.
    """
    root = Path(root)
    test_images = novel.subset(splits["test"].image_ids).images
    pretrained: dict[tuple[str, int], Checkpoint] = {}
    artifacts = []
    for cell, seed in plan_grid(grid, seeds):
        train_split = splits.get(f"train_{cell.sample_size}")
        ft_cfg = cell_finetune_config(finetune_template, cell, seed)
        pre_cfg = replace(pretrain_template, backend=cell.backend, seed=seed) if cell.pretrain else None
        spec = {
            "cell": cell.to_json(),
            "seed": seed,
            "finetune": ft_cfg.to_json(),
            "pretrain": None if pre_cfg is None else pre_cfg.to_json(),
            "novel": _dataset_fingerprint(novel),
            "base": _dataset_fingerprint(base),
            "train_ids": None if train_split is None else config_hash(list(train_split.image_ids)),
            "test_ids": config_hash(list(splits["test"].image_ids)),
        }
        directory = root / "runs" / config_hash(spec)
        if (directory / "result.json").exists():
            artifacts.append(RunArtifact.load(directory))
            continue
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(json.dumps(spec, indent=1, sort_keys=True))
        if config_echo is not None:
            (directory / "pipeline_config.json").write_text(config_echo)
        art = RunArtifact(cell, seed, directory, "running")
        try:
            if train_split is None:
                raise KeyError(f"split train_{cell.sample_size} missing from the split manifest")
            ckpt = None
            if pre_cfg is not None:
                k = (cell.backend, seed)
                if k not in pretrained:
                    pretrained[k] = run_pretrain_cached(base, pre_cfg, root)
                ckpt = pretrained[k]
            train_novel = novel.subset(train_split.image_ids, name=f"{novel.name}-train{cell.sample_size}")
            model_ckpt, runlog = finetune(ckpt, train_novel, base, ft_cfg, novel_class)
            runlog.write(directory)
            if save_checkpoints:
                model_ckpt.save(directory / "checkpoint")
            dets = detect_images(model_ckpt.model, test_images, ft_cfg.resize_shorter_side)
            write_detections(dets, directory / "detections.jsonl")
            cls = model_ckpt.classes[0]
            art.ap = evaluate_ap(dets, ground_truth_from_images(test_images, cls))
            art.status = "ok"
        except Exception as exc:  # recorded in the artifact and reported, never silently dropped
            log.error("run %s seed %d failed: %s", cell, seed, exc)
            art.status = "failed"
            art.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        art.save()
        artifacts.append(art)
    return artifacts


def collect_results(artifacts: Sequence[RunArtifact], ddof: int = 1) -> list[EvalResult]:
    by_key: dict[CellKey, EvalResult] = {}
    for a in artifacts:
        r = by_key.setdefault(a.key, EvalResult(a.key, ddof=ddof))
        if a.status == "ok" and a.ap is not None:
            r.per_seed[a.seed] = a.ap
        else:
            r.failed_seeds.append(a.seed)
    return [by_key[k] for k in sorted(by_key)]


def load_artifacts(root) -> list[RunArtifact]:
    runs = Path(root) / "runs"
    if not runs.exists():
        return []
    return [RunArtifact.load(p) for p in sorted(runs.iterdir()) if (p / "result.json").exists()]


def reevaluate(artifact: RunArtifact, test_images, class_label: str) -> float:
    dets = read_detections(artifact.directory / "detections.jsonl")
    return evaluate_ap(dets, ground_truth_from_images(test_images, class_label))
