"""Command-line interface: ``stepattn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error. Logs go to stderr, data
to files. Every run writes a JSON manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_open, atomic_write_text
from .core import InsufficientDataError
from .evaluation import DAYTIME, acf, read_split_csv, stratified_split, write_split_csv
from .ingest import (
    DataError,
    SynthConfig,
    apply_day_shift,
    align_day_shift,
    daily_step_profile,
    generate_synthetic_cohort,
    read_hourly_csv,
    read_minute_csv,
    read_truth_csv,
    rollup_minutes_to_hours,
    write_hourly_csv,
    write_truth_csv,
)
from .model import AttentionModel, TrainConfig, export_attention_maps, fit, write_attention_grid_csv
from .pipeline import (
    Fitted,
    evaluate_methods,
    fit_baselines,
    masked_targets,
    predict_method,
    predictions_rows,
    split_test_targets,
    validate_method,
)

log = logging.getLogger("stepattn")
SEED_ENV = "STEPATTN_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"global seed (default ${SEED_ENV} or 0)")
    common.add_argument("--config", help="JSON file of option defaults; flags override it")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="stepattn", description="Step-count imputation with sparse multi-timescale attention.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p.set_defaults(_subparsers=sub.choices)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--participants", type=int, default=20)
    s.add_argument("--weeks", type=int, default=26)
    s.add_argument("--missing-rate", type=float, default=0.3)
    s.add_argument("--out", required=True, help="observed hourly CSV")
    s.add_argument("--truth", help="ground-truth CSV (default: <out>.truth.csv)")

    s = sub.add_parser("rollup", parents=[common], help="roll minute data up to hourly blocks")
    s.add_argument("--minutes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--align", action="store_true", help="shift day-of-week labels to the cohort's mean daily profile")

    s = sub.add_parser("split", parents=[common], help="stratified train/validation/test splits")
    s.add_argument("--cohort", required=True)
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("train", parents=[common], help="train the attention model")
    s.add_argument("--cohort", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="per-epoch CSV (default: <out>.log.csv)")
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--d-k", type=int, default=8)
    s.add_argument("--batch-size", type=int, default=20000)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--mask-fraction", type=float, default=0.05)
    s.add_argument("--max-train-instances", type=int, default=None)
    s.add_argument("--max-val-instances", type=int, default=None)
    s.add_argument("--patience", type=int, default=None)

    def method_opts(s):
        s.add_argument("--cohort", required=True)
        s.add_argument("--methods", default="zero,median:dw_hd", help="comma-separated method list")
        s.add_argument("--split", help="split CSV (required for trained methods and test-block scoring)")
        s.add_argument("--model", help="attention checkpoint; comma-separated paths average their predictions")

    s = sub.add_parser("impute", parents=[common], help="impute blocks with one or more methods")
    method_opts(s)
    s.add_argument("--targets", choices=("test", "missing"), default="test")
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="score methods and write report tables")
    method_opts(s)
    s.add_argument("--truth", help="ground-truth CSV; scores the masked blocks instead of test blocks")
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("acf", parents=[common], help="cohort autocorrelation of step rates")
    s.add_argument("--cohort", required=True)
    s.add_argument("--max-lag", type=int, default=504)
    s.add_argument("--out", required=True)

    s = sub.add_parser("attn-export", parents=[common], help="average attention maps")
    s.add_argument("--cohort", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split", help="use its test blocks as targets (default: missing daytime blocks)")
    s.add_argument("--out-dir", required=True)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file not found: {args.config}")
    except json.JSONDecodeError as e:
        raise DataError(f"{args.config}: invalid JSON ({e})")
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - set(vars(args)))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    args._subparsers[args.command].set_defaults(**cfg)
    return parser.parse_args(argv)


# ------------------------------------------------------------------ manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, args: argparse.Namespace, inputs: dict, outputs: dict, params: dict, timings: dict):
    rec = {
        "command": args.command,
        "config": args.config,
        "seed": args.seed,
        "jobs": args.jobs,
        "version": __version__,
        "inputs": inputs,
        "outputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in outputs.items()},
        "params": params,
        "timings_seconds": timings,
    }
    atomic_write_text(path, json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")


def _manifest_for(out: str) -> str:
    return str(out) + ".manifest.json"


# ----------------------------------------------------------------- commands


def _methods(text: str) -> list[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    if not names:
        raise UsageError("no methods given")
    try:
        return [validate_method(m) for m in names]
    except ValueError as e:
        raise UsageError(str(e))


def _load_split(path, cohort):
    if path is None:
        return None
    if not Path(path).exists():
        raise DataError(f"split file not found: {path}")
    return read_split_csv(path, cohort)


def cmd_synth(args):
    cfg = SynthConfig(n_participants=args.participants, n_weeks=args.weeks, seed=args.seed, missing_rate=args.missing_rate)
    c = generate_synthetic_cohort(cfg)
    truth = args.truth or str(Path(args.out).with_suffix("")) + ".truth.csv"
    write_hourly_csv(c.observed, args.out)
    write_truth_csv(c.truth, c.masked, truth)
    return _manifest_for(args.out), {}, {"cohort": args.out, "truth": truth}, cfg.__dict__


def cmd_rollup(args):
    groups = read_minute_csv(args.minutes)
    series = [rollup_minutes_to_hours(recs).replace(participant_id=pid) for pid, recs in groups.items()]
    shifts = {}
    if args.align and series:
        ref = np.mean([daily_step_profile(s) for s in series], axis=0)
        aligned = []
        for s in series:
            k = align_day_shift(s, ref)
            shifts[s.participant_id] = k
            aligned.append(apply_day_shift(s, k))
        series = aligned
    write_hourly_csv(series, args.out)
    return _manifest_for(args.out), {"minutes": args.minutes}, {"hourly": args.out}, {"align": args.align, "shifts": shifts}


def cmd_split(args):
    cohort = read_hourly_csv(args.cohort)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for sp in stratified_split(cohort, n_folds=args.folds, seed=args.seed):
        path = out / f"split_{sp.fold}.csv"
        write_split_csv(sp, path)
        outputs[f"fold_{sp.fold}"] = str(path)
    return str(out / "manifest.json"), {"cohort": args.cohort}, outputs, {"folds": args.folds}


def cmd_train(args):
    cohort = read_hourly_csv(args.cohort)
    split = _load_split(args.split, cohort)
    cfg = TrainConfig(
        lr=args.lr, d_k=args.d_k, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        mask_fraction=args.mask_fraction, max_train_instances=args.max_train_instances,
        max_val_instances=args.max_val_instances, patience=args.patience, jobs=args.jobs,
    )
    model, tlog = fit(cohort, split, cfg)
    model.save(args.out)
    log_path = args.log or str(args.out) + ".log.csv"
    tlog.write_csv(log_path)
    params = {k: v for k, v in tlog.config.items() if k != "jobs"}
    params["best_epoch"] = tlog.best_epoch
    return _manifest_for(args.out), {"cohort": args.cohort, "split": args.split}, {"model": args.out, "log": log_path}, params


def _fitted(args, methods, cohort, split) -> Fitted:
    fitted = Fitted(seed=args.seed)
    if "attention" in methods:
        if not args.model:
            raise UsageError("method 'attention' needs --model")
        paths = [p for p in args.model.split(",") if p]
        for p in paths:
            if not Path(p).exists():
                raise DataError(f"model file not found: {p}")
        models = [AttentionModel.load(p) for p in paths]
        fitted.attention = models[0] if len(models) == 1 else models
    if any(m in ("regression", "iterative") for m in methods):
        if split is None:
            raise UsageError("regression and iterative need --split to train on")
        fit_baselines(methods, cohort, split, fitted)
    return fitted


def _write_predictions(path, rows):
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "hour_index", "method", "predicted_steps", "true_steps"])
        w.writerows(rows)


def cmd_impute(args):
    methods = _methods(args.methods)
    cohort = read_hourly_csv(args.cohort)
    split = _load_split(args.split, cohort)
    if args.targets == "test" and split is None:
        raise UsageError("--targets test needs --split")
    fitted = _fitted(args, methods, cohort, split)
    rows = []
    for m in methods:
        for s in cohort:
            hold = split.holdout(s.participant_id) if split is not None else np.zeros(s.T, dtype=bool)
            if args.targets == "test":
                tg = split.indices(s.participant_id, "test")
            else:
                hod = s.hour_of_day
                tg = np.flatnonzero(~s.observed & (hod >= DAYTIME[0]) & (hod <= DAYTIME[1]))
            if tg.size == 0:
                continue
            try:
                pred = predict_method(m, s, tg, hold, fitted)
            except InsufficientDataError as e:
                log.warning("%s: %s", s.participant_id, e)
                continue
            for t, p in zip(tg, pred):
                true = f"{s.steps[t]}" if s.observed[t] else ""
                rows.append([s.participant_id, int(t), m, f"{p:.6f}", true])
    _write_predictions(args.out, rows)
    return _manifest_for(args.out), {"cohort": args.cohort, "split": args.split, "model": args.model}, {"predictions": args.out}, {"methods": methods, "targets": args.targets}


def cmd_evaluate(args):
    methods = _methods(args.methods)
    cohort = read_hourly_csv(args.cohort)
    split = _load_split(args.split, cohort)
    if args.truth:
        truth, masks = read_truth_csv(args.truth)
        ids = {s.participant_id for s in truth}
        missing = [s.participant_id for s in cohort if s.participant_id not in ids]
        if missing:
            raise DataError(f"truth file lacks participants: {', '.join(missing[:5])}")
        ev = masked_targets(cohort, truth, masks, split)
    else:
        if split is None:
            raise UsageError("evaluate needs --truth or --split")
        ev = split_test_targets(cohort, split)
    fitted = _fitted(args, methods, cohort, split)
    report, preds, keep = evaluate_methods(methods, ev, fitted)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"table": out / "table.csv", "step_bins": out / "step_bins.csv", "report": out / "report.jsonl", "predictions": out / "predictions.csv"}
    report.write_table_csv(outputs["table"])
    report.write_step_bins_csv(outputs["step_bins"])
    report.write_jsonl(outputs["report"])
    _write_predictions(outputs["predictions"], predictions_rows(methods, ev, preds, keep))
    inputs = {"cohort": args.cohort, "truth": args.truth, "split": args.split, "model": args.model}
    return str(out / "manifest.json"), inputs, outputs, {"methods": methods}


def cmd_acf(args):
    cohort = read_hourly_csv(args.cohort)
    values = acf(cohort, max_lag=args.max_lag)
    with atomic_open(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "acf"])
        for k, v in enumerate(values, start=1):
            w.writerow([k, "" if np.isnan(v) else f"{v:.6f}"])
    return _manifest_for(args.out), {"cohort": args.cohort}, {"acf": args.out}, {"max_lag": args.max_lag}


def cmd_attn_export(args):
    cohort = read_hourly_csv(args.cohort)
    split = _load_split(args.split, cohort)
    if not Path(args.model).exists():
        raise DataError(f"model file not found: {args.model}")
    model = AttentionModel.load(args.model)
    targets, holdouts = {}, {}
    for s in cohort:
        if split is not None:
            targets[s.participant_id] = split.indices(s.participant_id, "test")
            holdouts[s.participant_id] = split.holdout(s.participant_id)
        else:
            hod = s.hour_of_day
            targets[s.participant_id] = np.flatnonzero(~s.observed & (hod >= DAYTIME[0]) & (hod <= DAYTIME[1]))
            holdouts[s.participant_id] = np.zeros(s.T, dtype=bool)
    overall, by_dow, counts = export_attention_maps(model, cohort, targets, holdouts)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"overall": out / "attention_overall.csv"}
    write_attention_grid_csv(overall, outputs["overall"])
    for d in range(7):
        outputs[f"dow_{d}"] = out / f"attention_dow{d}.csv"
        write_attention_grid_csv(by_dow[d], outputs[f"dow_{d}"])
    return str(out / "manifest.json"), {"cohort": args.cohort, "model": args.model, "split": args.split}, outputs, {"targets_per_dow": counts.tolist()}


COMMANDS = {
    "synth": cmd_synth,
    "rollup": cmd_rollup,
    "split": cmd_split,
    "train": cmd_train,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
    "acf": cmd_acf,
    "attn-export": cmd_attn_export,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.seed is None:
            args.seed = _default_seed()
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        t0 = time.perf_counter()
        manifest, inputs, outputs, params = COMMANDS[args.command](args)
        write_manifest(manifest, args, inputs, outputs, params, {"total": round(time.perf_counter() - t0, 3)})
        return 0
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"stepattn: error: {e}", file=sys.stderr)
        return 1
    except (DataError, InsufficientDataError, FileNotFoundError, KeyError) as e:
        print(f"stepattn: data error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"stepattn: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
