import csv
import json
from collections import Counter
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rarefind.annotations import AnnotatedImage, InstanceAnnotation, Point, QualityFlag, SegmentationBoundary, validate_dataset
from rarefind.datasets import (
    CSV_COLUMNS,
    Dataset,
    SchemaError,
    SplitError,
    ingest_point_csv,
    load_dataset,
    load_split_manifest,
    make_splits,
    sample_training_subsets,
    save_dataset,
    save_split_manifest,
    split_by_recency,
    write_rejects,
)
from rarefind.synthetic import novel_dataset, write_point_export

T0 = datetime(2019, 3, 1, 10, 0, 0)


def write_csv(path, rows, columns=CSV_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def row(image_id, label, x, y, w=100, h=80, ts=T0):
    return dict(image_path=f"{image_id}.png", image_id=image_id, captured_at=ts.isoformat(),
                class_label=label, point_x=x, point_y=y, image_width=w, image_height=h)


def test_three_row_fixture(tmp_path):
    p = write_csv(tmp_path / "p.csv", [row("a", "urchin", 3, 4), row("a", "sponge", 50, 60), row("b", "urchin", 10, 10)])
    ds, rejects = ingest_point_csv(p)
    assert rejects == []
    assert len(ds.images) == 2 and sum(len(i.annotations) for i in ds.images) == 3
    assert ds.class_vocabulary == {"sponge": 1, "urchin": 2}
    assert ds.images[0].captured_at == T0


def test_point_outside_image_rejected(tmp_path):
    p = write_csv(tmp_path / "p.csv", [row("a", "urchin", 3, 4), row("a", "urchin", 120, 4)])
    ds, rejects = ingest_point_csv(p)
    assert len(rejects) == 1 and rejects[0].line == 3
    write_rejects(rejects, tmp_path / "rejects.jsonl")
    lines = (tmp_path / "rejects.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["line"] == 3


def test_missing_column_is_hard_failure(tmp_path):
    cols = [c for c in CSV_COLUMNS if c != "captured_at"]
    p = write_csv(tmp_path / "p.csv", [row("a", "urchin", 3, 4)], columns=cols)
    with pytest.raises(SchemaError, match="captured_at"):
        ingest_point_csv(p)


def test_unparsable_rows_rejected(tmp_path):
    bad_ts = row("c", "kelp", 1, 1)
    bad_ts["captured_at"] = "yesterday"
    bad_x = row("d", "kelp", "abc", 1)
    p = write_csv(tmp_path / "p.csv", [row("a", "kelp", 1, 1), bad_ts, bad_x])
    ds, rejects = ingest_point_csv(p)
    assert [r.line for r in rejects] == [3, 4]
    assert [i.image_id for i in ds.images] == ["a"]


def test_tenth_scale_fixture_recount(tmp_path):
    # 27 images / 190 points / 6 classes
    rng = np.random.default_rng(0)
    labels = ["urchin", "sponge", "seastar", "kelp", "anemone", "scallop"]
    per_image = np.full(27, 190 // 27)
    per_image[: 190 - per_image.sum()] += 1
    rows = []
    for i, k in enumerate(per_image):
        for _ in range(k):
            rows.append(row(f"img{i:02d}", labels[rng.integers(6)], *rng.uniform(0, 80, 2), ts=T0 + timedelta(hours=i)))
    p = write_csv(tmp_path / "tenth.csv", rows)
    ds, rejects = ingest_point_csv(p)
    # independent recount straight from the file
    with open(p, newline="") as fh:
        recount = Counter(r["class_label"] for r in csv.DictReader(fh))
    assert rejects == []
    assert len(ds.images) == 27 and sum(recount.values()) == 190 and len(recount) == 6
    assert ds.class_vocabulary == dict(recount)


def test_pixel_loading_and_validation(tmp_path):
    ds = novel_dataset(4, seed=2, with_boundaries=False)
    csv_path = write_point_export(ds, tmp_path)
    loaded, rejects = ingest_point_csv(csv_path, images_root=tmp_path)
    assert rejects == []
    for a, b in zip(ds.images, loaded.images):
        assert np.array_equal(a.pixels, b.pixels)
    save_dataset(loaded, tmp_path / "out" / "ds.json")
    again = load_dataset(tmp_path / "out" / "ds.json")
    assert validate_dataset(again.images) == []


def _mixed_dataset():
    rng = np.random.default_rng(5)
    t = np.linspace(0, 2 * np.pi, 1000, endpoint=False)
    big = SegmentationBoundary.from_xy(np.stack([50 + 20 * np.cos(t) + rng.uniform(-1, 1, 1000) / 3,
                                                 40 + 15 * np.sin(t)], axis=1))
    anns = (
        InstanceAnnotation("x/0", "handfish", Point(50.25, 40.125)).with_boundary(big, corrected=True),
        InstanceAnnotation("x/1", "kelp", Point(3.3, 4.4), quality_flag=QualityFlag.FAILED),
        InstanceAnnotation("x/2", "kelp", Point(10, 10)).with_boundary(
            SegmentationBoundary.from_xy([(8, 8), (12.5, 8), (12.5, 11.75)]), quality_flag=QualityFlag.POOR),
    )
    px = rng.integers(0, 256, (80, 100, 3)).astype(np.uint8)
    img = AnnotatedImage("x", 100, 80, T0 + timedelta(microseconds=17), anns, pixels=px)
    img2 = AnnotatedImage("y", 100, 80, T0, (), pixels=px[::-1].copy())
    return Dataset("mixed", [img, img2])


def test_round_trip(tmp_path):
    ds = _mixed_dataset()
    save_dataset(ds, tmp_path / "ds.json")
    back = load_dataset(tmp_path / "ds.json")
    assert back == ds


def test_thousand_vertex_polygon_bit_exact(tmp_path):
    ds = _mixed_dataset()
    save_dataset(ds, tmp_path / "ds.json")
    back = load_dataset(tmp_path / "ds.json")
    v0 = ds.images[0].annotations[0].boundary.to_array()
    v1 = back.images[0].annotations[0].boundary.to_array()
    assert v0.shape == (1000, 2)
    assert v0.tobytes() == v1.tobytes()


def test_future_schema_version(tmp_path):
    save_dataset(_mixed_dataset(), tmp_path / "ds.json")
    doc = json.loads((tmp_path / "ds.json").read_text())
    doc["schema_version"] = 99
    (tmp_path / "ds.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="99"):
        load_dataset(tmp_path / "ds.json")


# splits -----------------------------------------------------------------------

def _dated(n, stamps=None):
    stamps = stamps or [T0 + timedelta(days=i) for i in range(n)]
    return Dataset("d", [AnnotatedImage(f"i{k}", 10, 10, s, ()) for k, s in enumerate(stamps)])


def test_recency_two_latest():
    test, rest = split_by_recency(_dated(5), 2)
    assert set(test.image_ids) == {"i3", "i4"}
    assert rest == ["i0", "i1", "i2"]


def test_recency_tie_break_by_id():
    stamps = [T0, T0 + timedelta(1), T0 + timedelta(1), T0 + timedelta(2)]
    ds = _dated(4, stamps)
    test, _ = split_by_recency(ds, 2)
    assert test.image_ids == ("i3", "i2")
    test_rev, _ = split_by_recency(Dataset("d", ds.images[::-1]), 2)
    assert test_rev.image_ids == test.image_ids


def test_recency_missing_timestamp():
    ds = Dataset("d", [AnnotatedImage("a", 5, 5, T0, ()), AnnotatedImage("nots", 5, 5, None, ())])
    with pytest.raises(SplitError, match="nots"):
        split_by_recency(ds, 1)


def test_full_size_split_counts():
    ds = novel_dataset(284, seed=0, width=32, height=32, with_boundaries=False)
    test, rest = split_by_recency(ds, 42)
    assert len(test) == 42 and len(rest) == 242
    splits = sample_training_subsets(rest, [50, 100, 200], 42, seed=3)
    assert [len(splits[k]) for k in ("train_50", "train_100", "train_200", "validation")] == [50, 100, 200, 42]
    assert set(splits["train_50"].image_ids) < set(splits["train_100"].image_ids) < set(splits["train_200"].image_ids)
    assert set(splits["train_200"].image_ids) <= set(splits["train_full"].image_ids)
    assert not set(splits["validation"].image_ids) & set(splits["train_full"].image_ids)
    every = set(test.image_ids) | set(splits["validation"].image_ids) | set(splits["train_full"].image_ids)
    assert every == {i.image_id for i in ds.images}


def test_subsets_deterministic_and_seed_sensitive():
    rest = [f"r{i}" for i in range(242)]
    a = sample_training_subsets(rest, [50, 100, 200], 42, seed=7)
    assert a == sample_training_subsets(rest, [50, 100, 200], 42, seed=7)
    firsts = {sample_training_subsets(rest, [50], 42, seed=s)["train_50"].image_ids for s in range(20)}
    assert len(firsts) == 20


def test_infeasible_sizes():
    with pytest.raises(SplitError):
        sample_training_subsets([f"r{i}" for i in range(100)], [50, 100], 42, seed=0)


def test_manifest_round_trip(tmp_path):
    splits = make_splits(_dated(60), 10, [5, 20], 8, seed=1)
    save_split_manifest(splits, tmp_path / "m.json", source="d")
    assert load_split_manifest(tmp_path / "m.json") == splits


@settings(max_examples=50)
@given(st.integers(10, 60), st.data())
def test_split_partition_properties(n, data):
    n_test = data.draw(st.integers(0, n // 3))
    n_val = data.draw(st.integers(0, (n - n_test) // 3))
    room = n - n_test - n_val
    sizes = sorted(set(data.draw(st.lists(st.integers(1, max(1, room)), min_size=1, max_size=3))))
    days = data.draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    ds = _dated(n, [T0 + timedelta(days=d) for d in days])
    splits = make_splits(ds, n_test, sizes, n_val, seed=data.draw(st.integers(0, 1000)))
    groups = [splits["test"], splits["validation"], splits["train_full"]]
    ids = [i for g in groups for i in g.image_ids]
    assert len(ids) == len(set(ids)) == n
    for s in sizes:
        assert len(splits[f"train_{s}"]) == s
    perm = data.draw(st.permutations(ds.images))
    assert set(split_by_recency(Dataset("p", list(perm)), n_test)[0].image_ids) == set(splits["test"].image_ids)
