"""From point labels to boxes.

Surveyors click once on each organism. This walkthrough renders a small
synthetic survey, writes it out as a point CSV, ingests it back, runs the
reference flood-fill segmenter and shows what each point turned into. It
finishes with the recency test split and the nested training subsets.

    python3 demos/01_points_to_boxes.py
"""

import tempfile
from pathlib import Path

from rarefind.datasets import Dataset, ingest_point_csv, make_splits
from rarefind.segmentation import ReferenceSegmenter, segment_dataset
from rarefind.synthetic import novel_dataset, write_point_export

work = Path(tempfile.mkdtemp(prefix="rarefind-demo-"))

# A survey of 120 images, each holding one rare organism plus a few common ones
# that nobody labelled. Only the click positions survive the export.
survey = novel_dataset(120, seed=5, width=80, height=60, with_boundaries=False)
csv_path = write_point_export(survey, work)
print(f"point export written to {csv_path}")

novel, rejects = ingest_point_csv(csv_path, images_root=work)
print(f"ingested {len(novel.images)} images, {len(rejects)} rejected rows")

first = novel.images[0]
ann = first.annotations[0]
print(f"\n{first.image_id}: label={ann.class_label} point=({ann.point.x:.1f}, {ann.point.y:.1f})")
print(f"  box before segmentation: {ann.bbox}")

# Each click becomes a prompt: the segmenter grows a region from it and traces
# the outline, which then defines the box.
segmenter = ReferenceSegmenter()
images, summary = segment_dataset(segmenter, novel.images)
novel = Dataset(novel.name, images)
ann = novel.images[0].annotations[0]
print(f"  boundary vertices: {len(ann.boundary.vertices)}")
print(f"  box after segmentation: {ann.bbox}")
print(f"  quality flag: {ann.quality_flag.value}")

print("\nsegmentation summary")
for line in summary.lines():
    print("  " + line)

# The newest 20 images are held out for testing; training subsets are nested so
# that a larger budget only ever adds images.
splits = make_splits(novel, 20, [25, 50], 10, seed=0)
print("\nsplits")
for name, split in splits.items():
    print(f"  {name:>12}: {len(split.image_ids)} images")
small, large = set(splits["train_25"].image_ids), set(splits["train_50"].image_ids)
print(f"  train_25 inside train_50: {small <= large}")
