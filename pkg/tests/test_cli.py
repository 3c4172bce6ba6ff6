import csv
import json
import time
from collections import Counter

import pytest

from rarefind.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, default_pipeline_config, main
from rarefind.datasets import CSV_COLUMNS, load_dataset
from rarefind.synthetic import base_dataset, novel_dataset, write_point_export


def cli(*argv):
    return main([str(a) for a in argv])


def run(capsys, *argv):
    code = cli(*argv)
    out, err = capsys.readouterr()
    return code, out, err


def small_config(ws, **over):
    cfg = default_pipeline_config()
    cfg["paths"] = {"novel_dataset": "novel_seg.json", "base_dataset": "base_seg.json", "splits": "splits.json",
                    "artifact_root": "artifacts"}
    for phase, lr in (("pretrain", 0.01), ("finetune", 0.005)):
        cfg[phase]["schedule"].update(base_lr=lr, total_iterations=100, warmup_iterations=10)
        cfg[phase]["resize_shorter_side"] = None
    cfg["finetune"]["augmentation"].update(copy_paste_enabled=True, base_mask_mode="segmentation")
    cfg["grid"] = {"rows": [[True, "none", "segmentation"]], "sample_sizes": [10], "backends": ["toy_centernet"]}
    cfg["seeds"] = [0, 1]
    cfg.update(over)
    path = ws / "pipeline.json"
    path.write_text(json.dumps(cfg, indent=1))
    return path


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    write_point_export(novel_dataset(40, seed=3), root / "export")
    write_point_export(base_dataset(16, seed=4), root / "export")
    for name in ("novel", "base"):
        assert cli("ingest", root / "export" / f"{name}_points.csv", "--images-root", root / "export",
                   "--out", root / f"{name}.json") == 0
        assert cli("segment", root / f"{name}.json", "--out", root / f"{name}_seg.json") == 0
    assert cli("split", root / "novel_seg.json", "--n-test", 10, "--sizes", "10", "--n-validation", 5,
               "--out", root / "splits.json") == 0
    return root


def test_ingest_valid(ws, capsys, tmp_path):
    code, out, _ = run(capsys, "ingest", ws / "export" / "base_points.csv", "--out", tmp_path / "b.json")
    assert code == EXIT_OK and (tmp_path / "b.json").exists()
    assert "16 images" in out
    assert (tmp_path / "b.rejects.jsonl").read_text() == ""


def test_ingest_missing_column(capsys, tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("image_id,captured_at\na,2020-01-01\n")
    code, _, err = run(capsys, "ingest", p, "--out", tmp_path / "x.json")
    assert code == EXIT_DATA and "point_x" in err


def test_ingest_two_bad_rows(capsys, tmp_path):
    p = tmp_path / "p.csv"
    with p.open("w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_COLUMNS)
        w.writeheader()
        for i in range(10):
            x = 500 if i in (3, 7) else 5
            w.writerow(dict(image_path=f"{i}.png", image_id=f"im{i}", captured_at="2020-01-01T00:00:00",
                            class_label="kelp", point_x=x, point_y=5, image_width=64, image_height=64))
    code, out, _ = run(capsys, "ingest", p, "--out", tmp_path / "d.json", "--rejects", tmp_path / "r.jsonl")
    assert code == EXIT_OK and "2 row(s) rejected" in out
    assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 2


def test_segment_summary_matches_tallies(ws, capsys, tmp_path):
    code, out, _ = run(capsys, "segment", ws / "base.json", "--out", tmp_path / "s.json")
    assert code == EXIT_OK
    tallies = Counter(a.class_label for i in load_dataset(ws / "base.json", load_pixels=False).images for a in i.annotations)
    printed = {line.split(":")[0]: line for line in out.splitlines()}
    assert set(printed) == set(tallies)
    for label, n in tallies.items():
        assert f"total={n} " in printed[label]
    assert "failure_rate=0.000" in out


def test_segment_is_idempotent(ws, capsys, tmp_path):
    run(capsys, "segment", ws / "novel.json", "--out", tmp_path / "a.json")
    run(capsys, "segment", ws / "novel.json", "--out", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_correct_with_dangling_id(ws, capsys, tmp_path):
    ds = load_dataset(ws / "novel_seg.json", load_pixels=False)
    img = ds.images[0]
    recs = [
        {"image_id": img.image_id, "annotation_id": img.annotations[0].id,
         "corrected_boundary": [[10, 10], [30, 10], [20, 30]], "reason": "background_included"},
        {"image_id": img.image_id, "annotation_id": "ghost", "corrected_boundary": [[1, 1], [5, 1], [5, 5]]},
    ]
    (tmp_path / "c.json").write_text(json.dumps(recs))
    before = (ws / "novel_seg.json").read_bytes()
    code, out, _ = run(capsys, "correct", ws / "novel_seg.json", tmp_path / "c.json", "--out", tmp_path / "n.json",
                       "--audit", tmp_path / "audit.jsonl")
    assert code == EXIT_OK
    assert "applied 1 correction(s)" in out
    assert sum(l.startswith("warning:") for l in out.splitlines()) == 1 and "ghost" in out
    assert (ws / "novel_seg.json").read_bytes() == before
    assert len((tmp_path / "audit.jsonl").read_text().splitlines()) == 2


def test_split_reference_shape(capsys, tmp_path):
    from rarefind.datasets import save_dataset

    save_dataset(novel_dataset(284, seed=0, width=24, height=24, with_boundaries=False), tmp_path / "d.json",
                 write_pixels=False)
    args = ("split", tmp_path / "d.json", "--n-test", 42, "--sizes", "50,100,200", "--n-validation", 42, "--seed", 3)
    code, out, _ = run(capsys, *args, "--out", tmp_path / "m1.json")
    assert code == EXIT_OK
    counts = json.loads((tmp_path / "m1.json").read_text())["counts"]
    assert [counts[k] for k in ("test", "train_50", "train_100", "train_200", "validation")] == [42, 50, 100, 200, 42]
    run(capsys, *args, "--out", tmp_path / "m2.json")
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    code, _, err = run(capsys, "split", tmp_path / "d.json", "--sizes", "50,100,300", "--out", tmp_path / "m3.json")
    assert code == EXIT_DATA and "need" in err


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "no-such-command")[0] == EXIT_USAGE
    assert run(capsys, "grid", "--config", tmp_path / "missing.json")[0] == EXIT_USAGE
    cfg = small_config(tmp_path, seeds=[1, 1])
    code, _, err = run(capsys, "grid", "--config", cfg)
    assert code == EXIT_USAGE and "distinct" in err


def test_init_config(capsys, tmp_path):
    assert run(capsys, "init-config", "--out", tmp_path / "c.json")[0] == EXIT_OK
    cfg = json.loads((tmp_path / "c.json").read_text())
    assert cfg["finetune"]["schedule"]["base_lr"] == 0.0005 and cfg["finetune"]["frozen_stages"] == [1, 2, 3]
    assert cfg["pretrain"]["schedule"]["total_iterations"] == 40000 and cfg["seeds"] == [0, 1, 2, 3, 4]


def test_pretrain_then_finetune(ws, capsys, tmp_path):
    cfg = small_config(ws)
    code, out, _ = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "pre")
    assert code == EXIT_OK and (tmp_path / "pre" / "checkpoint" / "model.pt").exists()
    assert (tmp_path / "pre" / "pipeline_config.json").read_text() == cfg.read_text()
    code, out, _ = run(capsys, "finetune", "--config", cfg, "--checkpoint", tmp_path / "pre" / "checkpoint",
                       "--size", 10, "--out", tmp_path / "ft")
    assert code == EXIT_OK and "test AP@0.5" in out
    trace = (tmp_path / "ft" / "trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,loss,lr" and len(trace) == 101
    code, _, err = run(capsys, "finetune", "--config", cfg, "--size", 77, "--out", tmp_path / "ft2")
    assert code == EXIT_DATA and "train_77" in err


def test_finetune_accepts_pretrain_output_dir(ws, capsys, tmp_path):
    cfg = small_config(ws)
    assert cli("pretrain", "--config", cfg, "--out", tmp_path / "pre") == EXIT_OK
    code, out, _ = run(capsys, "finetune", "--config", cfg, "--checkpoint", tmp_path / "pre", "--size", 10,
                       "--out", tmp_path / "ft")
    assert code == EXIT_OK and "test AP@0.5" in out
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "finetune", "--config", cfg, "--checkpoint", tmp_path / "empty", "--size", 10,
                       "--out", tmp_path / "ft2")
    assert code == EXIT_DATA and "no checkpoint" in err


def test_smoke_grid_resume_and_report(ws, capsys, tmp_path):
    cfg = small_config(ws)
    root = tmp_path / "art"
    t0 = time.perf_counter()
    code, out, _ = run(capsys, "grid", "--config", cfg, "--artifact-root", root)
    assert code == EXIT_OK and time.perf_counter() - t0 < 300
    runs = sorted((root / "runs").iterdir())
    assert len(runs) == 2
    for r in runs:
        assert (r / "pipeline_config.json").read_text() == cfg.read_text()
    stamps = {r: (r / "result.json").stat().st_mtime_ns for r in runs}
    code, out2, _ = run(capsys, "grid", "--config", cfg, "--artifact-root", root)
    assert code == EXIT_OK and out2 == out
    assert {r: (r / "result.json").stat().st_mtime_ns for r in runs} == stamps

    code, table, _ = run(capsys, "report", root)
    assert code == EXIT_OK and table == out
    code, again, _ = run(capsys, "evaluate", root, "--novel", ws / "novel_seg.json", "--splits", ws / "splits.json",
                         "--out", tmp_path / "re.json")
    assert code == EXIT_OK and again == out


def test_report_marks_and_dashes(capsys, tmp_path):
    from rarefind.evaluation import CellKey, EvalResult, save_results

    res = [EvalResult(CellKey(False, "none", "none", 50, "b"), {0: 0.2, 1: 0.3}),
           EvalResult(CellKey(False, "none", "segmentation", 50, "b"), {0: 0.4, 1: 0.5}),
           EvalResult(CellKey(True, "none", "none", 50, "b"), {0: 0.1, 1: 0.1})]
    save_results(res, tmp_path / "r.json")
    code, table, _ = run(capsys, "report", tmp_path / "r.json", "--out", tmp_path / "t.txt")
    assert code == EXIT_OK
    assert "45.0±7.1*" in table and "25.0±7.1+" in table and "10.0±0.0 " not in table
    rows = table.splitlines()[3:]
    assert len(rows) == 8 and rows[2].rstrip().endswith("-")
    assert (tmp_path / "t.txt").read_text() == table


def test_augment_preview(ws, capsys, tmp_path):
    code, out, _ = run(capsys, "augment-preview", "--novel", ws / "novel_seg.json", "--base", ws / "base_seg.json",
                       "--novel-mask", "segmentation", "--base-mask", "segmentation", "--n", 4, "--out", tmp_path / "pv")
    assert code == EXIT_OK and "wrote 4" in out
    assert len(list((tmp_path / "pv").glob("*.png"))) == 4
