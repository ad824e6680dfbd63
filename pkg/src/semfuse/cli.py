"""Command-line entry point: validate, stats, kappa, split, train, eval, predict, explain."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, load_config
from .data import (
    AgreementUndefinedError,
    AnnotationMatrix,
    DatasetError,
    FoldPlan,
    dataset_stats,
    fleiss_kappa,
    load_dataset,
    make_fold_plan,
)
from .evaluation import EvalReport, write_report
from .explain import ExplainError, export_attention, grad_cam, save_attention, save_heatmap
from .image_encoder import load_image, preprocess_image
from .model import load_checkpoint
from .text_encoder import build_joint_sequence, clean_text
from .training import TrainingError, evaluate_checkpoint, predict, run_cross_validation, task_records

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
RESOLVED_CONFIG = "config.resolved"

log = logging.getLogger("semfuse")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def _out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.verb} requires --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, model_cfg, train_cfg, run) -> None:
    (out / RESOLVED_CONFIG).write_text(dump_config(model_cfg, train_cfg, run), encoding="utf-8")


def cmd_validate(args) -> int:
    records = load_dataset(args.data, args.image_root, strict=not args.lenient, labeled=not args.unlabeled)
    print(f"ok records={len(records)} skipped={len(records.skipped)}")
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = dataset_stats(load_dataset(args.data, args.image_root))
    obj = stats.to_json()
    if args.out is not None:
        (_out(args) / "stats.json").write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    print(f"total={stats.total} antisemitic={stats.binary['antisemitic']} "
          + " ".join(f"{k}={v}" for k, v in stats.categories.items()))
    return EXIT_OK


def _read_annotations(path: Path) -> np.ndarray:
    if path.suffix == ".json":
        return np.array(json.loads(path.read_text(encoding="utf-8")))
    with path.open(newline="") as fh:
        return np.array([[int(x) for x in row] for row in csv.reader(fh) if row])


def cmd_kappa(args) -> int:
    try:
        matrix = AnnotationMatrix.from_counts(_read_annotations(Path(args.annotations)))
    except (ValueError, OSError) as exc:
        raise DatasetError(f"bad annotation matrix: {exc}") from None
    kappa = fleiss_kappa(matrix)
    if args.out is not None:
        (_out(args) / "kappa.json").write_text(json.dumps({"kappa": kappa, "items": len(matrix.counts),
                                                            "annotators": matrix.n}) + "\n")
    print(f"kappa={kappa:.6f}")
    return EXIT_OK


def cmd_split(args) -> int:
    records = task_records(load_dataset(args.data), args.task)
    plan = make_fold_plan(records, args.k, args.seed)
    out = _out(args)
    plan.save(out / "foldplan.json")
    print(f"ok folds={plan.k} records={len(records)} path={out / 'foldplan.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg, run = load_config(args.config, args.set)
    records = load_dataset(args.data, args.image_root)
    plan = FoldPlan.load(args.fold_plan)
    run_dir = _out(args) / "runs" / run["run_id"]
    run_dir.mkdir(parents=True, exist_ok=True)
    run = {**run, "data": str(Path(args.data).resolve()), "image_root": str(Path(args.image_root).resolve())}
    _write_resolved(run_dir, model_cfg, train_cfg, run)
    plan.save(run_dir / "foldplan.json")
    results = run_cross_validation(records, plan, model_cfg, train_cfg, args.image_root, out_dir=run_dir,
                                   parallel_folds=args.parallel_folds)
    reports = [r for _, r in results]
    write_report(run_dir / "report.json", model_cfg.task, model_cfg.fusion, reports)
    print(f"ok run={run_dir} folds={len(reports)}")
    return EXIT_OK


def _run_settings(run_dir: Path) -> dict:
    path = run_dir / RESOLVED_CONFIG
    if not path.is_file():
        raise DatasetError(f"{run_dir} is not a train run directory")
    settings = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        settings[key.strip()] = value.strip()
    return settings


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    settings = _run_settings(run_dir)
    data = args.data or settings["data"]
    image_root = args.image_root or settings["image_root"]
    plan = FoldPlan.load(run_dir / "foldplan.json")
    by_id = {r.id: r for r in load_dataset(data, image_root)}
    reports = []
    for i, fold in enumerate(plan.folds):
        _, ckpt = load_checkpoint(run_dir / f"fold{i}" / "checkpoint.pt")
        reports.append(evaluate_checkpoint(ckpt, [by_id[x] for x in fold.test], image_root))
    out = _out(args)
    shutil.copyfile(run_dir / RESOLVED_CONFIG, out / RESOLVED_CONFIG)
    obj = write_report(out / "report.json", settings["task"], settings["fusion"], reports)
    agg = obj["aggregate"]
    print(f"ok accuracy={agg['accuracy_mean']:.4f}+-{agg['accuracy_std']:.4f} "
          f"macro_f1={agg['f1_mean']:.4f}+-{agg['f1_std']:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, ckpt = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data, args.image_root, labeled=False)
    log_probs = predict(model, records, args.image_root)
    out = _out(args)
    with (out / "predictions.jsonl").open("w", encoding="utf-8") as fh:
        for rec, lp in zip(records, log_probs):
            probs = np.exp(lp)
            fh.write(json.dumps({"id": rec.id, "class": int(np.argmax(lp)), "probabilities": probs.tolist()}) + "\n")
    (out / RESOLVED_CONFIG).write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(ckpt["model_config"].items())), encoding="utf-8")
    print(f"ok predictions={len(records)}")
    return EXIT_OK


def cmd_explain(args) -> int:
    model, ckpt = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data, args.image_root, labeled=False)
    wanted = set(args.ids.split(",")) if args.ids else None
    out = _out(args)
    n = 0
    for rec in records:
        if wanted is not None and rec.id not in wanted:
            continue
        seq = build_joint_sequence(clean_text(rec.text), clean_text(rec.ocr_text), model.cfg.max_len,
                                   model.tokenizer, model.cfg.truncation)
        image = preprocess_image(load_image(Path(args.image_root) / rec.image_path))
        target = args.target_class
        if target is None:
            scores, _ = model.gradcam_forward(image[None], seq)
            target = int(scores.argmax(dim=-1)[0])
        save_heatmap(grad_cam(model, image, target, seq), out, rec.id)
        save_attention(export_attention(model, seq), out, rec.id)
        n += 1
    (out / RESOLVED_CONFIG).write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(ckpt["model_config"].items())), encoding="utf-8")
    print(f"ok explained={n}")
    return EXIT_OK


def build_parser() -> Parser:
    p = Parser(prog="semfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--out", help="output directory; nothing is written elsewhere")
        return sp

    sp = add("validate", cmd_validate, "check a dataset file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--image-root")
    sp.add_argument("--lenient", action="store_true", help="skip invalid records instead of failing")
    sp.add_argument("--unlabeled", action="store_true")

    sp = add("stats", cmd_stats, "corpus statistics")
    sp.add_argument("--data", required=True)
    sp.add_argument("--image-root")

    sp = add("kappa", cmd_kappa, "Fleiss' kappa of an item x category count matrix (JSON or CSV)")
    sp.add_argument("--annotations", required=True)

    sp = add("split", cmd_split, "write a k-fold plan")
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--task", choices=("binary", "multiclass"), default="binary")

    sp = add("train", cmd_train, "cross-validated training")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--image-root", required=True)
    sp.add_argument("--fold-plan", required=True)
    sp.add_argument("--parallel-folds", type=int, default=1)

    sp = add("eval", cmd_eval, "evaluate a train run's fold checkpoints on their test sets")
    sp.add_argument("--run", required=True, help="runs/<run-id> directory written by train")
    sp.add_argument("--data")
    sp.add_argument("--image-root")

    sp = add("predict", cmd_predict, "classify posts with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--image-root", required=True)

    sp = add("explain", cmd_explain, "GradCAM and attention exports")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--image-root", required=True)
    sp.add_argument("--ids", help="comma-separated post ids (default: all)")
    sp.add_argument("--target-class", type=int)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail("config", EXIT_USAGE, exc)
    except (DatasetError, AgreementUndefinedError, FileNotFoundError, KeyError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except (TrainingError, ExplainError, RuntimeError, ValueError) as exc:
        return _fail("runtime", EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
