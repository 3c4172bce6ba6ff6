"""Command-line entry point: ``rarefind <command> ...``.

Exit codes: 0 success (possibly with warnings), 1 usage or configuration
error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def default_pipeline_config() -> dict:
    """Default hyper-parameters with paths left for the user to fill in."""
    from .augment import AugmentationConfig
    from .training import TrainRunConfig, reference_schedule
    from .training.grid import GridSpec

    return {
        "paths": {"novel_dataset": "novel.json", "base_dataset": "base.json", "splits": "splits.json", "artifact_root": "artifacts"},
        "segmenter": {"name": "reference", "tolerance": 10},
        "split": {"n_test": 42, "sizes": [50, 100, 200], "n_validation": 42, "seed": 0},
        "novel_class": None,
        "pretrain": TrainRunConfig("pretrain", reference_schedule("pretrain")).to_json(),
        "finetune": TrainRunConfig(
            "finetune", reference_schedule("finetune"), frozen_stages=(1, 2, 3), augmentation=AugmentationConfig()
        ).to_json(),
        "grid": GridSpec().to_json(),
        "seeds": [0, 1, 2, 3, 4],
    }


def load_pipeline_config(path) -> tuple[dict, str]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file {path} does not exist", EXIT_USAGE)
    text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}", EXIT_USAGE) from None
    base = default_pipeline_config()
    for k, v in cfg.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k in ("paths", "split", "segmenter"):
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    for k, v in base["paths"].items():
        if v is not None and not Path(v).is_absolute():
            base["paths"][k] = str(path.parent / v)
    seeds = base["seeds"]
    if len(set(seeds)) != len(seeds):
        raise CliError(f"seeds must be distinct: {seeds}", EXIT_USAGE)
    return base, text


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {p} does not exist", EXIT_USAGE)
    return p


def _checkpoint_dir(path) -> Path:
    # accept a pretrain output directory or the checkpoint inside it
    p = _require(path, "checkpoint")
    for cand in (p, p / "checkpoint"):
        if (cand / "meta.json").exists():
            return cand
    raise CliError(f"no checkpoint found in {p}", EXIT_DATA)


def _load(path, what="dataset"):
    from .datasets import SchemaError, load_dataset

    try:
        return load_dataset(_require(path, what))
    except SchemaError as exc:
        raise CliError(str(exc), EXIT_DATA) from None


# --- commands -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    from .datasets import SchemaError, ingest_point_csv, save_dataset, write_rejects

    try:
        ds, rejects = ingest_point_csv(_require(args.csv, "CSV file"), args.images_root, name=args.name)
    except SchemaError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    out = save_dataset(ds, args.out)
    rejects_path = Path(args.rejects) if args.rejects else out.with_suffix(".rejects.jsonl")
    write_rejects(rejects, rejects_path)
    n_ann = sum(len(i.annotations) for i in ds.images)
    print(f"ingested {len(ds.images)} images, {n_ann} annotations -> {out}")
    for label, count in ds.class_vocabulary.items():
        print(f"  {label}: {count}")
    if rejects:
        print(f"warning: {len(rejects)} row(s) rejected, see {rejects_path}")
    return EXIT_OK


def cmd_segment(args) -> int:
    from .datasets import Dataset, save_dataset
    from .segmentation import build_segmenter, segment_dataset

    ds = _load(args.dataset)
    spec = {"name": args.segmenter}
    if args.segmenter == "reference":
        spec["tolerance"] = args.tolerance
    elif args.segmenter == "http":
        if not args.url:
            raise CliError("--url is required for the http segmenter", EXIT_USAGE)
        spec["url"] = args.url
    classes = args.classes.split(",") if args.classes else None
    images, summary = segment_dataset(build_segmenter(spec), ds.images, classes, max_workers=args.workers)
    save_dataset(Dataset(ds.name, images), args.out)
    for line in summary.lines():
        print(line)
    return EXIT_OK


def cmd_correct(args) -> int:
    from .datasets import Dataset, save_dataset
    from .segmentation import apply_corrections, load_corrections

    ds = _load(args.dataset)
    try:
        records = load_corrections(_require(args.corrections, "corrections file"))
    except (ValueError, KeyError) as exc:
        raise CliError(f"{args.corrections}: {exc}", EXIT_DATA) from None
    images, audit = apply_corrections(ds.images, records)
    save_dataset(Dataset(ds.name, images), args.out)
    applied = sum(1 for a in audit if a.action == "applied")
    print(f"applied {applied} correction(s)")
    for a in audit:
        if a.action == "rejected":
            print(f"warning: rejected correction for {a.image_id}/{a.annotation_id}: {a.detail}")
    if args.audit:
        Path(args.audit).write_text("".join(json.dumps(a.__dict__) + "\n" for a in audit))
    return EXIT_OK


def cmd_split(args) -> int:
    from .datasets import SplitError, make_splits, save_split_manifest

    ds = _load(args.dataset)
    sizes = [int(s) for s in args.sizes.split(",")]
    try:
        splits = make_splits(ds, args.n_test, sizes, args.n_validation, args.seed)
    except SplitError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    save_split_manifest(splits, args.out, dataset=ds.name, n_test=args.n_test, sizes=sizes,
                        n_validation=args.n_validation, seed=args.seed)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return EXIT_OK


def _train_config(cfg: dict, phase: str, args):
    from .training import TrainConfigError, TrainRunConfig

    d = dict(cfg[phase])
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "backend", None):
        d["backend"] = args.backend
    try:
        return TrainRunConfig.from_json(d)
    except (TrainConfigError, ValueError, TypeError, KeyError) as exc:
        raise CliError(f"{phase} config: {exc}", EXIT_USAGE) from None


def cmd_pretrain(args) -> int:
    from .training import pretrain

    cfg, text = load_pipeline_config(args.config)
    base = _load(args.base or cfg["paths"]["base_dataset"], "base dataset")
    tc = _train_config(cfg, "pretrain", args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pipeline_config.json").write_text(text)
    ckpt, runlog = pretrain(base, tc)
    ckpt.save(out / "checkpoint")
    runlog.write(out)
    print(f"pre-trained {tc.backend} on {len(ckpt.classes)} classes -> {out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .datasets import load_split_manifest
    from .evaluation import evaluate_ap, ground_truth_from_images, write_detections
    from .training import Checkpoint, detect_images, finetune

    cfg, text = load_pipeline_config(args.config)
    novel = _load(args.novel or cfg["paths"]["novel_dataset"], "novel dataset")
    splits = load_split_manifest(_require(args.splits or cfg["paths"]["splits"], "split manifest"))
    tc = _train_config(cfg, "finetune", args)
    base = None
    if tc.augmentation.copy_paste_enabled or args.base:
        base = _load(args.base or cfg["paths"]["base_dataset"], "base dataset")
    ckpt = Checkpoint.load(_checkpoint_dir(args.checkpoint)) if args.checkpoint else None
    key = f"train_{args.size}"
    if key not in splits:
        raise CliError(f"split {key} not in manifest", EXIT_DATA)
    train = novel.subset(splits[key].image_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pipeline_config.json").write_text(text)
    model, runlog = finetune(ckpt, train, base, tc, cfg.get("novel_class"))
    model.save(out / "checkpoint")
    runlog.write(out)
    test = novel.subset(splits["test"].image_ids).images
    dets = detect_images(model.model, test, tc.resize_shorter_side)
    write_detections(dets, out / "detections.jsonl")
    ap = evaluate_ap(dets, ground_truth_from_images(test, model.classes[0]))
    print(f"fine-tuned on {len(train.images)} images; test AP@0.5 = {ap:.4f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    from .datasets import load_split_manifest
    from .evaluation import render_results_table, save_results
    from .training.grid import GridSpec, collect_results, run_experiment_grid

    cfg, text = load_pipeline_config(args.config)
    paths = cfg["paths"]
    novel = _load(paths["novel_dataset"], "novel dataset")
    base = _load(paths["base_dataset"], "base dataset")
    splits = load_split_manifest(_require(paths["splits"], "split manifest"))
    root = Path(args.artifact_root or paths.get("artifact_root") or _default_root())
    grid = GridSpec.from_json(cfg["grid"])
    artifacts = run_experiment_grid(
        grid, cfg["seeds"], novel, base, splits,
        _train_config(cfg, "pretrain", args), _train_config(cfg, "finetune", args),
        root, cfg.get("novel_class"), config_echo=text,
    )
    results = collect_results(artifacts)
    save_results(results, root / "results.json", root / "results.csv")
    print(render_results_table(results), end="")
    failed = [a for a in artifacts if a.status != "ok"]
    for a in failed:
        print(f"warning: run {a.directory.name} failed: {a.error}")
    return EXIT_RUNTIME if failed and len(failed) == len(artifacts) else EXIT_OK


def _default_root() -> Path:
    from .training.trainer import artifact_root

    return artifact_root()


def cmd_evaluate(args) -> int:
    from .datasets import load_split_manifest
    from .evaluation import render_results_table, save_results
    from .training.grid import collect_results, load_artifacts, reevaluate

    root = _require(args.runs, "artifact root")
    artifacts = load_artifacts(root)
    if args.novel:
        novel = _load(args.novel, "novel dataset")
        splits = load_split_manifest(_require(args.splits, "split manifest"))
        test = novel.subset(splits["test"].image_ids).images
        label = args.novel_class or sorted({a.class_label for i in novel.images for a in i.annotations})[0]
        for a in artifacts:
            if a.status == "ok":
                a.ap = reevaluate(a, test, label)
    results = collect_results(artifacts)
    out = Path(args.out) if args.out else root / "results.json"
    save_results(results, out, out.with_suffix(".csv"))
    print(render_results_table(results), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import load_results, render_results_table

    path = _require(args.results, "results file")
    if path.is_dir():
        path = path / "results.json"
    try:
        results = load_results(path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from None
    table = render_results_table(results, scale=args.scale)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    from .augment import AugmentationConfig, generate_samples, write_preview
    from .training.trainer import _prepare, trainable_images

    cfg, _ = load_pipeline_config(args.config) if args.config else (default_pipeline_config(), "")
    novel = _load(args.novel, "novel dataset")
    base = _load(args.base, "base dataset")
    aug = AugmentationConfig.from_json(cfg["finetune"]["augmentation"])
    if args.novel_mask or args.base_mask:
        aug = AugmentationConfig.from_modes(args.novel_mask or aug.novel_mask_mode, args.base_mask or aug.base_mask_mode,
                                            apply_probability=aug.apply_probability)
    size = cfg["finetune"].get("resize_shorter_side")
    npool = trainable_images(_prepare(novel.images, size))
    bpool = trainable_images(_prepare(base.images, size))
    samples = generate_samples(npool, bpool, aug, args.seed, range(args.n))
    written = write_preview(samples, args.out)
    print(f"wrote {len(written)} preview sample(s) to {args.out}")
    return EXIT_OK


def cmd_init_config(args) -> int:
    Path(args.out).write_text(json.dumps(default_pipeline_config(), indent=1))
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rarefind", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write a pipeline config with the default hyper-parameters")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("ingest", help="point CSV -> dataset JSON + rejects report")
    s.add_argument("csv")
    s.add_argument("--images-root")
    s.add_argument("--out", required=True)
    s.add_argument("--rejects")
    s.add_argument("--name")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("segment", help="turn point annotations into boundaries and boxes")
    s.add_argument("dataset")
    s.add_argument("--segmenter", default="reference", choices=["reference", "http"])
    s.add_argument("--tolerance", type=int, default=10)
    s.add_argument("--url")
    s.add_argument("--classes", help="comma-separated label filter")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("correct", help="apply a batch of boundary corrections")
    s.add_argument("dataset")
    s.add_argument("corrections")
    s.add_argument("--out", required=True)
    s.add_argument("--audit")
    s.set_defaults(func=cmd_correct)

    s = sub.add_parser("split", help="recency test split + seeded nested training subsets")
    s.add_argument("dataset")
    s.add_argument("--n-test", type=int, default=42)
    s.add_argument("--sizes", default="50,100,200")
    s.add_argument("--n-validation", type=int, default=42)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("pretrain", help="pre-train on the base classes")
    s.add_argument("--config", required=True)
    s.add_argument("--base")
    s.add_argument("--backend")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune on one novel training subset")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", help="pre-trained checkpoint directory; omit for no pre-training")
    s.add_argument("--novel")
    s.add_argument("--base")
    s.add_argument("--splits")
    s.add_argument("--size", type=int, default=50)
    s.add_argument("--backend")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("grid", help="run (or resume) the full ablation grid")
    s.add_argument("--config", required=True)
    s.add_argument("--artifact-root")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("evaluate", help="aggregate AP over finished runs")
    s.add_argument("runs", help="artifact root")
    s.add_argument("--novel", help="re-score detections against this dataset's test split")
    s.add_argument("--splits")
    s.add_argument("--novel-class")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render the results table from a results export")
    s.add_argument("results")
    s.add_argument("--scale", type=float, default=100.0, help="multiply AP by this for display")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("augment-preview", help="write composited copy-paste samples for inspection")
    s.add_argument("--novel", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--config")
    s.add_argument("--novel-mask", choices=["none", "bounding_box", "segmentation"])
    s.add_argument("--base-mask", choices=["none", "segmentation"])
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment_preview)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 3
        logging.getLogger("rarefind").debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
