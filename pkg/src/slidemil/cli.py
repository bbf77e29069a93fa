"""Batch command-line interface.

Subcommands: validate, synth, train, predict, cv, grid, compare, explain.
Every run writes a reproducibility record (resolved configuration, seed,
container format versions) into its output directory, output files are
written atomically (temp file + rename), and no command ever mutates its
inputs.  Exit codes: 0 success, 2 validation failure, 3 I/O or container
format failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, bagstore, cvharness, evaluation, models, synthgen, trainer
from .errors import NumericError, SlideMilError, ValidationError
from .models import ModelConfig
from .trainer import TrainConfig

OUT_DIR_ENV = "SLIDEMIL_OUT_DIR"

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _atomic_write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8", newline="")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _write_record(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    record = {
        "command": command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "format_versions": {
            "bag": bagstore.FORMAT_VERSION,
            "checkpoint": models.CHECKPOINT_VERSION,
        },
        "package_version": __version__,
    }
    _atomic_write(out_dir / "run_record.json",
                  json.dumps(record, sort_keys=True, default=str, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_range(text: str, name: str):
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            return (int(lo), int(hi))
        return int(text)
    except ValueError:
        raise ValidationError(f"--{name}: expected INT or LO:HI, got {text!r}") from None


def _model_config(args) -> ModelConfig:
    cfg = ModelConfig(kind=args.model, r=args.r, n_hidden=args.n_hidden,
                      l2_c=args.l2_c)
    cfg.validate()
    return cfg


def _train_config(args, seed=None) -> TrainConfig:
    subsample = args.subsample if args.subsample and args.subsample > 0 else None
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_bags=args.batch_bags,
        subsample_tiles=subsample,
        seed=args.seed if seed is None else seed,
    )
    cfg.validate()
    return cfg


def _float_csv(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    dataset = bagstore.load_dataset(args.manifest)
    labeled = dataset.labeled_patients()
    centers = {bag.center_id for bag in dataset.bags}
    n_pos = sum(1 for y in labeled.values() if y == 1)
    print(f"bags={len(dataset)}")
    print(f"patients={len(dataset.patients())}")
    print(f"centers={len(centers)}")
    print(f"labeled_patients={len(labeled)} (pos={n_pos}, neg={len(labeled) - n_pos})")
    dims = {bag.dim for bag in dataset.bags}
    print(f"feature_dims={sorted(dims)}")
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args)
    config = synthgen.SynthConfig(
        n_patients=args.n_patients,
        slides_per_patient=_parse_range(args.slides_per_patient, "slides-per-patient"),
        tiles_per_slide=_parse_range(args.tiles_per_slide, "tiles-per-slide"),
        d=args.d,
        witness_rate=args.witness_rate,
        signal_shift=args.signal_shift,
        signal_dims=args.signal_dims,
        positive_fraction=args.positive_fraction,
        n_centers=args.n_centers,
        center_shift=args.center_shift,
        seed=args.seed,
    )
    dataset, witness = synthgen.generate(config)
    bagstore.write_dataset(dataset, out)
    order = [bag.slide_id for bag in dataset.bags]
    _atomic_write(out / "witness.csv", synthgen.witness_csv(witness, order))
    _write_record(out, "synth", args)
    print(f"wrote {len(dataset)} bags under {out}")
    return 0


def _validate_chowder_size(config: ModelConfig, dataset, train_config) -> None:
    if config.kind != "chowder":
        return
    cap = train_config.subsample_tiles
    for bag in dataset.bags:
        n = bag.n_tiles if cap is None else min(bag.n_tiles, cap)
        if n < 2 * config.r:
            raise ValidationError(
                f"bag {bag.slide_id!r}: N={n} tiles after subsampling "
                f"< 2r={2 * config.r}"
            )


def cmd_train(args) -> int:
    out = _out_dir(args)
    dataset = bagstore.load_dataset(args.manifest)
    model_config = _model_config(args)
    train_config = _train_config(args)
    _validate_chowder_size(model_config, dataset, train_config)
    result = trainer.train(model_config, dataset, train_config)
    ckpt = out / "checkpoint.ckpt"
    models.save_checkpoint(result.params, ckpt)
    _atomic_write(out / "loss_trace.csv", trainer.loss_trace_csv(result.loss_trace))
    _write_record(out, "train", args)
    print(f"checkpoint written to {ckpt}")
    print(f"final mean training loss: {result.loss_trace[-1]!r}")
    return 0


def cmd_predict(args) -> int:
    out = _out_dir(args)
    dataset = bagstore.load_dataset(args.manifest)
    checkpoints = [models.load_checkpoint(p) for p in args.checkpoint]

    per_model_slides = []
    per_model_patients = []
    for params in checkpoints:
        slide_probs = models.predict_slides(params, dataset.bags)
        per_model_slides.append(slide_probs)
        patients = evaluation.aggregate_patients(slide_probs, dataset)
        per_model_patients.append({p.patient_id: p.probability for p in patients})

    slide_median = evaluation.ensemble_median(per_model_slides)
    patient_median = evaluation.ensemble_median(per_model_patients)

    slide_lines = ["slide_id,probability"]
    for bag in dataset.bags:
        slide_lines.append(f"{bag.slide_id},{_float_csv(slide_median[bag.slide_id])}")
    _atomic_write(out / "slide_predictions.csv", "\n".join(slide_lines) + "\n")

    patient_preds = []
    seen = set()
    for bag in dataset.bags:
        if bag.patient_id in seen:
            continue
        seen.add(bag.patient_id)
        patient_preds.append(
            evaluation.PatientPrediction(
                patient_id=bag.patient_id,
                probability=patient_median[bag.patient_id],
                label=dataset.patient_label(bag.patient_id),
            )
        )
    _atomic_write(out / "patient_predictions.csv",
                  evaluation.predictions_csv(patient_preds))

    labels = [p.label for p in patient_preds]
    if all(y is not None for y in labels):
        n_pos = sum(labels)
        if n_pos >= 2 and len(labels) - n_pos >= 2:
            report = evaluation.evaluate(patient_preds)
            _atomic_write(out / "eval_report.txt", evaluation.report_text(report))
            print(f"auc={report.auc!r} ci95=({report.ci95[0]!r}, {report.ci95[1]!r})")
    _write_record(out, "predict", args)
    print(f"predictions written under {out}")
    return 0


def _cv_job(payload):
    model_config, dataset, plan, train_config, grid = payload
    if grid is not None and not plan.degenerate:
        train_ds = dataset.subset(plan.train_patients)
        fold_seed = trainer.derive_seed(train_config.seed, plan.repeat_index,
                                        plan.fold_index)
        search = cvharness.grid_search(train_ds, grid,
                                       replace(train_config, seed=fold_seed))
        model_config = search.best_config
        train_config = replace(train_config, epochs=search.best_epochs)
        fold = cvharness.run_fold(model_config, dataset, plan, train_config)
        return fold, search
    return cvharness.run_fold(model_config, dataset, plan, train_config), None


def _grid_from_args(args) -> cvharness.GridSpec | None:
    lists = (args.grid_r, args.grid_n_hidden, args.grid_l2_c, args.grid_epochs)
    if all(v is None for v in lists):
        return None
    spec = cvharness.GridSpec(
        kind=args.model,
        r_values=tuple(int(v) for v in args.grid_r.split(",")) if args.grid_r
        else cvharness.GridSpec.r_values,
        n_hidden_values=tuple(int(v) for v in args.grid_n_hidden.split(","))
        if args.grid_n_hidden else cvharness.GridSpec.n_hidden_values,
        l2_values=tuple(float(v) for v in args.grid_l2_c.split(","))
        if args.grid_l2_c else cvharness.GridSpec.l2_values,
        epoch_values=tuple(int(v) for v in args.grid_epochs.split(","))
        if args.grid_epochs else cvharness.GridSpec.epoch_values,
    )
    spec.validate()
    return spec


def _make_plans(dataset, args):
    if args.split == "center":
        plans = cvharness.make_center_folds(dataset, args.k, args.repeats, args.seed)
        cvharness.check_no_leakage(plans, dataset, grouped_by_center=True)
    else:
        plans = cvharness.make_stratified_folds(dataset, args.k, args.repeats, args.seed)
        cvharness.check_no_leakage(plans, dataset)
    return plans


def cmd_cv(args) -> int:
    out = _out_dir(args)
    dataset = bagstore.load_dataset(args.manifest)
    model_config = _model_config(args)
    train_config = _train_config(args)
    grid = _grid_from_args(args)
    if grid is None:
        _validate_chowder_size(model_config, dataset, train_config)
    plans = _make_plans(dataset, args)
    _atomic_write(out / "plans.json", cvharness.plans_to_json(plans))

    jobs = [(model_config, dataset, plan, train_config, grid) for plan in plans]
    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(_cv_job, jobs))
    else:
        outcomes = [_cv_job(job) for job in jobs]

    folds = [fold for fold, _ in outcomes]
    summary = cvharness.summarize_folds(folds)
    _atomic_write(out / "folds.csv", cvharness.folds_csv(summary))
    _atomic_write(out / "summary.txt", cvharness.summary_text(summary))
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for fold, search in outcomes:
        if fold.params is not None:
            name = f"fold_r{fold.repeat_index}_f{fold.fold_index}.ckpt"
            models.save_checkpoint(fold.params, ckpt_dir / name)
        if search is not None:
            log = cvharness.grid_log_csv(search)
            _atomic_write(
                out / f"grid_r{fold.repeat_index}_f{fold.fold_index}.csv", log
            )
    _write_record(out, "cv", args)
    print(f"mean_auc={summary.mean_auc!r} sd_auc={summary.sd_auc!r} "
          f"({len(summary.valid_aucs())}/{len(summary.folds)} folds)")
    return 0


def cmd_grid(args) -> int:
    out = _out_dir(args)
    dataset = bagstore.load_dataset(args.manifest)
    train_config = _train_config(args)
    grid = _grid_from_args(args)
    if grid is None:
        grid = cvharness.GridSpec(kind=args.model)
    result = cvharness.grid_search(dataset, grid, train_config,
                                   val_fraction=args.val_fraction)
    _atomic_write(out / "grid_log.csv", cvharness.grid_log_csv(result))
    best = {
        "kind": result.best_config.kind,
        "r": result.best_config.r,
        "n_hidden": result.best_config.n_hidden,
        "l2_c": result.best_config.l2_c,
        "epochs": result.best_epochs,
    }
    _atomic_write(out / "best.json", json.dumps(best, sort_keys=True, indent=2) + "\n")
    _write_record(out, "grid", args)
    print(f"best: {best}")
    return 0


def _read_patient_csv(path) -> list[evaluation.PatientPrediction]:
    preds = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["patient_id", "label", "probability"]:
            raise ValidationError(f"{path}: expected header patient_id,label,probability")
        for row in reader:
            if not row:
                continue
            pid, label_text, prob = (f.strip() for f in row)
            label = None if label_text == "NA" else int(label_text)
            preds.append(evaluation.PatientPrediction(pid, float(prob), label))
    return preds


def cmd_compare(args) -> int:
    preds_a = _read_patient_csv(args.pred_a)
    preds_b = _read_patient_csv(args.pred_b)
    result = evaluation.delong_paired_test(preds_a, preds_b)
    text = (
        f"auc_a={result.auc_a!r}\n"
        f"auc_b={result.auc_b!r}\n"
        f"z={result.z!r}\n"
        f"p_two_sided={result.p_value!r}\n"
        f"degenerate={int(result.degenerate)}\n"
    )
    sys.stdout.write(text)
    if args.out_dir is not None:
        out = _out_dir(args)
        _atomic_write(out / "compare.txt", text)
        _write_record(out, "compare", args)
    return 0


def cmd_explain(args) -> int:
    out = _out_dir(args)
    dataset = bagstore.load_dataset(args.manifest)
    params = models.load_checkpoint(args.checkpoint)
    matches = [bag for bag in dataset.bags if bag.slide_id == args.slide_id]
    if not matches:
        raise ValidationError(f"unknown slide {args.slide_id!r}")
    bag = matches[0]
    prediction = models.forward(params, bag)
    scores = prediction.tile_scores
    lines = ["tile_index,x,y,score"]
    for i, score in enumerate(scores):
        if bag.coords is not None:
            x, y = repr(float(bag.coords[i, 0])), repr(float(bag.coords[i, 1]))
        else:
            x = y = "NA"
        lines.append(f"{i},{x},{y},{_float_csv(score)}")
    _atomic_write(out / "tile_scores.csv", "\n".join(lines) + "\n")

    if params.kind == "chowder":
        sel, values = models.extreme_concat(np.asarray(scores), params.r)
        ext = ["kind,rank,tile_index,score"]
        for rank in range(params.r):
            ext.append(f"top,{rank + 1},{sel[rank]},{_float_csv(values[rank])}")
        for rank in range(params.r):
            ext.append(
                f"bottom,{rank + 1},{sel[params.r + rank]},"
                f"{_float_csv(values[params.r + rank])}"
            )
        _atomic_write(out / "extremes.csv", "\n".join(ext) + "\n")
    _write_record(out, "explain", args)
    print(f"slide {bag.slide_id}: probability={prediction.probability!r} "
          f"logit={prediction.logit!r}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_out_dir(p: argparse.ArgumentParser, required: bool = False) -> None:
    default = os.environ.get(OUT_DIR_ENV)
    p.add_argument("--out-dir", default=default,
                   required=required and default is None,
                   help=f"output directory (default: ${OUT_DIR_ENV})")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, choices=models.MODEL_KINDS)
    p.add_argument("--r", type=int, default=10, help="chowder extreme tiles per side")
    p.add_argument("--n-hidden", type=int, default=128, help="deepmil attention width")
    p.add_argument("--l2-c", type=float, default=0.0, help="meanpool L2 coefficient")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--subsample", type=int, default=trainer.DEFAULT_SUBSAMPLE,
                   help="tiles kept per bag during training; 0 disables")
    p.add_argument("--batch-bags", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-r", default=None, help="comma list, e.g. 10,25,100")
    p.add_argument("--grid-n-hidden", default=None, help="comma list, e.g. 64,128,256")
    p.add_argument("--grid-l2-c", default=None, help="comma list, e.g. 0,0.5,1")
    p.add_argument("--grid-epochs", default=None, help="comma list within [5,120]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidemil",
        description="Multiple-instance learning over precomputed tile features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a manifest and its feature files")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", help="generate a planted-signal dataset")
    p.add_argument("--n-patients", type=int, default=100)
    p.add_argument("--slides-per-patient", default="1", help="INT or LO:HI")
    p.add_argument("--tiles-per-slide", default="150", help="INT or LO:HI")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--witness-rate", type=float, default=0.2)
    p.add_argument("--signal-shift", type=float, default=2.0)
    p.add_argument("--signal-dims", type=int, default=4)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--n-centers", type=int, default=1)
    p.add_argument("--center-shift", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    _add_out_dir(p, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a labeled manifest")
    p.add_argument("--manifest", required=True)
    _add_train_flags(p)
    _add_out_dir(p, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", action="append", required=True,
                   help="repeatable; >1 checkpoint combines by per-patient median")
    _add_out_dir(p, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", help="repeated k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    _add_train_flags(p)
    _add_grid_flags(p)
    p.add_argument("--split", choices=("random", "center"), default="random")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--workers", type=int, default=1,
                   help="parallel fold jobs; training itself stays single-threaded")
    _add_out_dir(p, required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("grid", help="hyperparameter grid search on a manifest")
    p.add_argument("--manifest", required=True)
    _add_train_flags(p)
    _add_grid_flags(p)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    _add_out_dir(p, required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("compare", help="paired DeLong test on two prediction CSVs")
    p.add_argument("--pred-a", required=True)
    p.add_argument("--pred-b", required=True)
    _add_out_dir(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("explain", help="per-tile scores for one slide")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide-id", required=True)
    _add_out_dir(p, required=True)
    p.set_defaults(func=cmd_explain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SlideMilError as exc:
        # format/corruption and any other package error count as I/O class
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
