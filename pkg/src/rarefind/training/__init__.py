"""Detector backends, the two-phase trainer and the ablation grid runner."""

from .backend import BACKENDS, DetectorBackend, RawDetection, Target, ToyCenterNet, ToyWideCenterNet, build_backend, register_backend
from .grid import GridSpec, RunArtifact, collect_results, load_artifacts, plan_grid, run_experiment_grid
from .schedule import TrainingSchedule, lr_at, reference_schedule
from .trainer import (
    Checkpoint,
    NonFiniteLoss,
    RunLog,
    TrainConfigError,
    TrainRunConfig,
    detect_images,
    finetune,
    pretrain,
    resize_shorter_side,
)

__all__ = [
    "BACKENDS", "DetectorBackend", "RawDetection", "Target", "ToyCenterNet", "ToyWideCenterNet", "build_backend",
    "register_backend", "GridSpec", "RunArtifact", "collect_results", "load_artifacts", "plan_grid",
    "run_experiment_grid", "TrainingSchedule", "lr_at", "reference_schedule", "Checkpoint", "NonFiniteLoss", "RunLog",
    "TrainConfigError", "TrainRunConfig", "detect_images", "finetune", "pretrain", "resize_shorter_side",
]
