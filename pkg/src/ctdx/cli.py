"""Batch command-line interface.

Every command is deterministic for fixed inputs, flags and seed: outputs are
written in sorted patient order regardless of processing order, so reruns
are byte-identical.  Exit codes: 0 success, 1 usage error, 2 data error
(including partial per-patient failures), 3 internal invariant violation.

Configuration precedence: command-line flags override values from a
``--config`` JSON file, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .aggregate import (
    VoteThresholds,
    assemble_features,
    pool_ensemble,
    read_features,
    votes_from_records,
    write_features,
)
from .errors import (
    CtdxError,
    DataError,
    EmptyPredictionsError,
    InternalError,
    KeyMismatchError,
)
from .evaluate import confusion, report, stratified_folds
from .heads import (
    CLASS_ORDER,
    HEAD_KINDS,
    TrainConfig,
    load_head,
    predict_head,
    save_head,
    train_head,
)
from .ingest import (
    KIND_SLICE,
    count_slices,
    load_volume,
    read_labels,
    read_predictions,
    write_labels,
    write_predictions,
)
from .predictor import (
    FilePredictor,
    SyntheticPredictor,
    SyntheticPredictorConfig,
    emit_slice_records,
    emit_subvolume_records,
    make_roster,
    stable_hash,
)
from .sampling import inference_subvolumes, train_sample


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(lines: list[str], out: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).write_text(text, encoding="ascii", newline="\n")
    else:
        sys.stdout.write(text)


def _warn(message: str) -> None:
    print(f"ctdx: {message}", file=sys.stderr)


def _patient_dirs(data_dir: str) -> list[Path]:
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not dirs:
        raise DataError(f"data directory {root} contains no patient directories")
    return dirs


def _map_patients(dirs, worker, jobs: int):
    """Run ``worker(dir)`` per patient, any order, results keyed by name."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda d: _safe(worker, d), dirs))
    else:
        outcomes = [_safe(worker, d) for d in dirs]
    return {d.name: outcome for d, outcome in zip(dirs, outcomes)}


def _safe(worker, arg):
    try:
        return True, worker(arg)
    except (CtdxError, OSError, ValueError) as exc:
        return False, exc


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    labels = read_labels(args.labels) if args.labels else None
    dirs = _patient_dirs(args.data_dir)

    def load(d):
        volume = load_volume(d, labels)
        return f"{volume.patient_id},{volume.n_slices},{volume.height},{volume.width}"

    results = _map_patients(dirs, load, args.jobs)
    lines, failed = [], 0
    for name in sorted(results):
        ok, value = results[name]
        if ok:
            lines.append(value)
        else:
            failed += 1
            _warn(f"patient {name}: {value}")
    _emit(lines, args.out)
    return 2 if failed else 0


def cmd_plan(args) -> int:
    dirs = _patient_dirs(args.data_dir)

    def plan(d):
        n = count_slices(d)
        if args.mode == "train":
            plans = [train_sample(n, [args.seed, stable_hash(d.name)])]
        else:
            plans = inference_subvolumes(n)
        return [
            f"{d.name},{p.start},{p.stride},{p.pad_count},{p.target_len}"
            for p in plans
        ]

    results = _map_patients(dirs, plan, args.jobs)
    lines, failed = [], 0
    for name in sorted(results):
        ok, value = results[name]
        if ok:
            lines.extend(value)
        else:
            failed += 1
            _warn(f"patient {name}: {value}")
    _emit(lines, args.out)
    return 2 if failed else 0


def _vote_records(records, thresholds: VoteThresholds):
    """(diagnoses, patients without any sub-volume vote)."""
    grouped = votes_from_records(records)
    all_patients = {rec.patient_id for rec in records}
    unvotable = sorted(all_patients - set(grouped))
    diagnoses = {
        patient_id: pool_ensemble(per_model, thresholds)
        for patient_id, per_model in grouped.items()
    }
    return diagnoses, unvotable


def cmd_vote(args) -> int:
    records = read_predictions(args.predictions)
    if not records:
        raise EmptyPredictionsError(f"{args.predictions} contains no records")
    thresholds = VoteThresholds(args.t_noncovid, args.t_all)
    diagnoses, unvotable = _vote_records(records, thresholds)
    for patient_id in unvotable:
        _warn(f"patient {patient_id}: no SUBVOLUME predictions to vote on")
    _emit([f"{p},{diagnoses[p]}" for p in sorted(diagnoses)], args.out)
    return 2 if unvotable else 0


def cmd_features(args) -> int:
    records = read_predictions(args.predictions)
    slice_models = sorted({r.model_id for r in records if r.kind == KIND_SLICE})
    if not slice_models:
        raise DataError(f"{args.predictions} contains no SLICE records")
    if args.model_id:
        if args.model_id not in slice_models:
            raise DataError(
                f"model {args.model_id!r} has no SLICE records; "
                f"available: {slice_models}"
            )
        model_id = args.model_id
    elif len(slice_models) == 1:
        model_id = slice_models[0]
    else:
        raise DataError(
            f"multiple slice models present {slice_models}; pick one with --model-id"
        )
    backend = FilePredictor(records, model_id)
    patients = sorted({r.patient_id for r in records
                       if r.kind == KIND_SLICE and r.model_id == model_id})
    features = {
        patient_id: assemble_features(backend.predict_slices(patient_id), args.rows)
        for patient_id in patients
    }
    write_features(features, args.out)
    return 0


def cmd_train_head(args) -> int:
    features = read_features(args.features)
    labels = read_labels(args.labels)
    patients = sorted(features)
    unlabeled = [p for p in patients if p not in labels]
    if unlabeled:
        raise KeyMismatchError(f"no label for patients {unlabeled[:5]}")
    cfg = TrainConfig(
        epochs=args.epochs,
        lr_init=args.lr,
        warmup_epochs=args.warmup,
        batch_size=args.batch_size,
        label_smoothing=args.label_smoothing,
        sam_rho=args.sam_rho,
        seed=args.seed,
    )
    model = train_head(
        [features[p] for p in patients],
        [labels[p] for p in patients],
        kind=args.head,
        cfg=cfg,
        hidden_units=args.hidden_units,
    )
    save_head(model, args.out)
    return 0


def cmd_predict_head(args) -> int:
    model = load_head(args.model)
    features = read_features(args.features)
    lines = []
    for patient_id in sorted(features):
        dist = predict_head(model, features[patient_id])
        lines.append(f"{patient_id},{CLASS_ORDER[int(dist.argmax())]}")
    _emit(lines, args.out)
    return 0


def cmd_folds(args) -> int:
    labels = read_labels(args.labels)
    assignment = stratified_folds(labels, args.folds, args.seed)
    _emit([f"{p},{assignment[p]}" for p in sorted(assignment)], args.out)
    return 0


def cmd_eval(args) -> int:
    truth = read_labels(args.truth)
    if args.features and not args.model:
        raise ValueError("--features needs --model to score features with a head")
    if args.diagnoses:
        predicted = read_labels(args.diagnoses)
    elif args.features:
        model = load_head(args.model)
        features = read_features(args.features)
        predicted = {
            patient_id: CLASS_ORDER[int(predict_head(model, matrix).argmax())]
            for patient_id, matrix in features.items()
        }
    else:
        records = read_predictions(args.predictions)
        thresholds = VoteThresholds(args.t_noncovid, args.t_all)
        predicted, unvotable = _vote_records(records, thresholds)
        if unvotable:
            raise EmptyPredictionsError(
                f"no SUBVOLUME predictions for patients {unvotable[:5]}"
            )
    metadata = dict(item.split("=", 1) for item in args.meta or [])
    text = report(confusion(predicted, truth), metadata)
    if args.out:
        Path(args.out).write_text(text, encoding="ascii", newline="\n")
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    roster = make_roster(args.n_covid, args.n_noncovid,
                         args.min_slices, args.max_slices, args.seed)
    config = SyntheticPredictorConfig(
        lesion_prob_covid=args.lesion_prob_covid,
        lesion_prob_noncovid=args.lesion_prob_noncovid,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        central_band=args.central_band,
    )
    records = []
    for index in range(args.models):
        model = SyntheticPredictor(config, roster, model_id=f"model{index:02d}")
        records.extend(emit_subvolume_records(model))
        if index == 0:
            records.extend(emit_slice_records(model))
    write_labels({p: label for p, (label, _) in roster.items()},
                 out_dir / "labels.csv")
    write_predictions(records, out_dir / "predictions.csv")
    _warn(f"wrote {len(roster)} patients, {len(records)} records to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _apply_config(parser, commands, config: dict) -> None:
    """Config values become per-flag defaults (and satisfy required flags);
    anything passed explicitly on the command line still wins."""
    used = set()
    for p in commands:
        for action in p._actions:
            if action.dest in config:
                action.default = config[action.dest]
                action.required = False
                used.add(action.dest)
    unknown = sorted(set(config) - used)
    if unknown:
        parser.error(f"unknown config keys: {', '.join(unknown)}")


def build_parser(config: dict | None = None) -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ctdx",
        description=(
            "CT volume classification pipeline: inventory slice directories, "
            "plan sub-volume sampling, vote stored model predictions into "
            "diagnoses, assemble slice-probability features, train and apply "
            "classifier heads, build folds and evaluate macro-F1."
        ),
    )
    parser.add_argument("--version", action="version", version=f"ctdx {__version__}")
    parser.add_argument("--config", metavar="FILE",
                        help="JSON file of flag defaults (dest names as keys); "
                             "explicit flags override it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate slice directories and list volumes")
    p.add_argument("--data-dir", required=True, help="directory of patient directories")
    p.add_argument("--labels", help="optional patient_id,LABEL file")
    p.add_argument("--jobs", type=int, default=1, help="parallel volume loads")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("plan", help="emit sub-volume sampling plans")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--mode", choices=("train", "infer"), required=True)
    p.add_argument("--seed", type=int, default=0,
                   help="train-mode start offsets derive from this seed per patient")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("vote", help="pool SUBVOLUME predictions into diagnoses")
    p.add_argument("--predictions", required=True)
    p.add_argument("--t-noncovid", type=float, default=0.5,
                   help="drop NON_COVID votes below this confidence")
    p.add_argument("--t-all", type=float, default=0.5,
                   help="then drop any vote below this confidence")
    p.add_argument("--out", help="diagnosis file (default stdout)")
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser("features", help="assemble per-patient feature matrices "
                                        "from SLICE predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--model-id", help="slice model to read (required if ambiguous)")
    p.add_argument("--rows", type=int, default=96, help="feature rows per patient")
    p.add_argument("--out", required=True, help="feature file")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-head", help="train a classifier head on features")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--head", choices=HEAD_KINDS, default="logreg")
    p.add_argument("--hidden-units", type=int, default=100)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--label-smoothing", type=float, default=0.0)
    p.add_argument("--sam-rho", type=float, default=0.0,
                   help="sharpness-aware perturbation radius (0 = plain SGD)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("predict-head", help="apply a trained head to features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", help="diagnosis file (default stdout)")
    p.set_defaults(func=cmd_predict_head)

    p = sub.add_parser("folds", help="seeded stratified fold assignment")
    p.add_argument("--labels", required=True)
    p.add_argument("--folds", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="fold file (default stdout)")
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("eval", help="score diagnoses (or run vote / a trained "
                                    "head first) against ground truth")
    p.add_argument("--truth", required=True, help="ground-truth labels file")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--diagnoses", help="pre-voted patient_id,LABEL file")
    source.add_argument("--predictions", help="prediction file; votes are pooled "
                                              "with the thresholds below")
    source.add_argument("--features", help="feature file; scored with the head "
                                           "given by --model")
    p.add_argument("--model", help="trained head file (with --features)")
    p.add_argument("--t-noncovid", type=float, default=0.5)
    p.add_argument("--t-all", type=float, default=0.5)
    p.add_argument("--meta", action="append", metavar="KEY=VALUE",
                   help="extra key=value lines for the report")
    p.add_argument("--out", help="report file (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic labels + predictions "
                                     "dataset for pipeline testing")
    p.add_argument("--n-covid", type=int, required=True)
    p.add_argument("--n-noncovid", type=int, required=True)
    p.add_argument("--min-slices", type=int, default=40)
    p.add_argument("--max-slices", type=int, default=300)
    p.add_argument("--models", type=int, default=1,
                   help="ensemble size; SLICE records come from the first model")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--lesion-prob-covid", type=float, default=0.9)
    p.add_argument("--lesion-prob-noncovid", type=float, default=0.1)
    p.add_argument("--central-band", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    if config:
        _apply_config(parser, sub.choices.values(), config)
    return parser


def _load_config(path) -> dict:
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise DataError(f"config {path} must hold a JSON object")
    return config


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    bootstrap = argparse.ArgumentParser(add_help=False)
    bootstrap.add_argument("--config")
    known, remaining = bootstrap.parse_known_args(argv)
    try:
        config = _load_config(known.config) if known.config else None
    except DataError as exc:
        _warn(f"error: {exc}")
        return 2
    parser = build_parser(config)
    args = parser.parse_args(remaining)
    try:
        return args.func(args)
    except InternalError as exc:
        _warn(f"internal error: {exc}")
        return 3
    except (DataError, OSError) as exc:
        _warn(f"error: {exc}")
        return 2
    except ValueError as exc:
        _warn(f"invalid parameter: {exc}")
        return 1
    except CtdxError as exc:
        _warn(f"internal error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
