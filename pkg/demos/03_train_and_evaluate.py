"""Pre-train, fine-tune, evaluate.

The small torch detector learns six common species first. Its early stages are
then frozen and the head is retrained on 50 images of the rare species, with
base organisms pasted in. AP@0.5 on the newest images closes the loop. The run
takes well under a minute on one core.

    python3 demos/03_train_and_evaluate.py
"""

import time

import torch

from rarefind.augment import AugmentationConfig
from rarefind.datasets import Dataset, make_splits
from rarefind.evaluation import evaluate_ap, ground_truth_from_images, operating_point
from rarefind.segmentation import ReferenceSegmenter, segment_dataset
from rarefind.synthetic import NOVEL_SPECIES, base_dataset, novel_dataset
from rarefind.training import TrainingSchedule, TrainRunConfig, detect_images, finetune, pretrain

torch.set_num_threads(1)
t0 = time.perf_counter()

segmenter = ReferenceSegmenter()
novel = novel_dataset(284, seed=1, width=80, height=60, with_boundaries=False)
base = base_dataset(80, seed=2, width=80, height=60, with_boundaries=False)
novel = Dataset(novel.name, segment_dataset(segmenter, novel.images)[0])
base = Dataset(base.name, segment_dataset(segmenter, base.images)[0])
splits = make_splits(novel, 42, [50, 100, 200], 42, seed=0)
print(f"data ready: {len(base.images)} base images, {len(novel.images)} rare-class images")

schedule = dict(total_iterations=400, warmup_iterations=100, batch_size=4)
pre_cfg = TrainRunConfig("pretrain", TrainingSchedule(0.01, **schedule), resize_shorter_side=64, seed=0)
ckpt, pre_log = pretrain(base, pre_cfg)
print(f"pre-training loss {pre_log.trace[0][1]:.3f} -> {pre_log.trace[-1][1]:.3f}")

ft_cfg = TrainRunConfig(
    "finetune", TrainingSchedule(0.005, **schedule), frozen_stages=(1, 2, 3),
    augmentation=AugmentationConfig.from_modes("none", "segmentation"), resize_shorter_side=64, seed=0,
)
train = novel.subset(splits["train_50"].image_ids)
model, ft_log = finetune(ckpt, train, base, ft_cfg)
print(f"fine-tuning loss {ft_log.trace[0][1]:.3f} -> {ft_log.trace[-1][1]:.3f} on {len(train.images)} images")

test = novel.subset(splits["test"].image_ids).images
detections = detect_images(model.model, test, 64)
truth = ground_truth_from_images(test, NOVEL_SPECIES.label)
ap = evaluate_ap(detections, truth)
op = operating_point(detections, truth, 0.5)
print(f"\nAP@0.5 on {len(test)} held-out images: {ap:.3f}")
print(f"at score >= 0.5: precision {op.precision:.3f}, recall {op.recall:.3f}")
print(f"elapsed {time.perf_counter() - t0:.1f} s")
