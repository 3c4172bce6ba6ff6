"""Warmup + multistep learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional


@dataclass(frozen=True)
class TrainingSchedule:
    base_lr: float
    total_iterations: int
    warmup_iterations: int = 1000
    warmup_start_factor: float = 1e-3
    decay_milestones: tuple[float, ...] = (0.9, 0.95, 0.995)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 1

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be positive")
        if not 0 <= self.warmup_iterations < self.total_iterations:
            raise ValueError(
                f"warmup_iterations ({self.warmup_iterations}) must be < total_iterations ({self.total_iterations})"
            )
        ms = tuple(self.decay_milestones)
        if any(not 0 < m <= 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"decay milestones must be strictly increasing in (0, 1]: {ms}")
        object.__setattr__(self, "decay_milestones", ms)

    @property
    def milestone_iterations(self) -> tuple[int, ...]:
        # a milestone at fraction f takes effect from iteration round(f * total)
        return tuple(round(m * self.total_iterations) for m in self.decay_milestones)

    def to_json(self) -> dict:
        d = asdict(self)
        d["decay_milestones"] = list(self.decay_milestones)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainingSchedule":
        d = dict(d)
        d["decay_milestones"] = tuple(d.get("decay_milestones", (0.9, 0.95, 0.995)))
        return cls(**d)


def lr_at(schedule: TrainingSchedule, iteration: int) -> float:
    """Learning rate used for ``iteration`` (0-based).

    During warmup the rate ramps linearly from ``base_lr * warmup_start_factor``
    at iteration 0 to ``base_lr`` at ``warmup_iterations``; afterwards it is
    ``base_lr`` times ``decay_factor`` for each milestone already reached.
    """
    if not 0 <= iteration < schedule.total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iterations})")
    lr = schedule.base_lr
    if iteration < schedule.warmup_iterations:
        alpha = iteration / schedule.warmup_iterations
        return lr * (schedule.warmup_start_factor * (1 - alpha) + alpha)
    for m in schedule.milestone_iterations:
        if iteration >= m:
            lr *= schedule.decay_factor
    return lr


def reference_schedule(
    phase: str, iterations_per_epoch: int = 1000, epochs: int = 40, finetune_ratio: Optional[float] = None
) -> TrainingSchedule:
    """Reference hyper-parameters: 0.001 for pre-training, 0.0005 for fine-tuning.

    ``finetune_ratio`` instead sets the fine-tune rate as a fraction of the
    pre-training one (``1 / 20`` gives 5e-5).
    """
    pre = 0.001
    if phase == "pretrain":
        base = pre
    elif phase == "finetune":
        base = 0.0005 if finetune_ratio is None else pre * finetune_ratio
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return TrainingSchedule(base_lr=base, total_iterations=iterations_per_epoch * epochs, warmup_iterations=1000)
