"""Metrics, stratified partitioning, binning, autocorrelation and reports."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from ._io import atomic_open
from .core import ParticipantSeries

DAYTIME = (6, 22)
MISSING_RATE_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
MISSING_RATE_LABELS = ("[0,20)", "[20,40)", "[40,60)", "[60,80)", "[80,100)")
STEP_BIN_WIDTH = 500
PARTS = {"train": 0, "validation": 1, "test": 2}


# ------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metrics:
    macro_mae: float
    micro_mae: float
    macro_rmse: float
    micro_rmse: float
    n_participants: int
    n_blocks: int


def metrics(errors: Sequence[Sequence[float]]) -> Metrics:
    """Micro/Macro MAE and RMSE from per-participant errors (signed or absolute).

    Participants with no errors are left out of the macro averages.
    """
    per = [np.asarray(e, dtype=np.float64).ravel() for e in errors]
    per = [e for e in per if e.size]
    if not per:
        raise ValueError("no errors to summarise")
    ae = [np.abs(e) for e in per]
    se = [e * e for e in per]
    n = sum(e.size for e in per)
    return Metrics(
        macro_mae=float(np.mean([a.mean() for a in ae])),
        micro_mae=float(sum(a.sum() for a in ae) / n),
        macro_rmse=float(np.mean([math.sqrt(s.mean()) for s in se])),
        micro_rmse=math.sqrt(sum(s.sum() for s in se) / n),
        n_participants=len(per),
        n_blocks=n,
    )


def ci95(values: Sequence[float]) -> float:
    """1.96 times the standard error of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float("nan")
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test over per-participant scores; returns (t, p)."""
    res = sps.ttest_rel(np.asarray(a, float), np.asarray(b, float))
    return float(res.statistic), float(res.pvalue)


# ------------------------------------------------------------------- splits


def eligible_blocks(series: ParticipantSeries) -> np.ndarray:
    hod = series.hour_of_day
    return series.observed & (hod >= DAYTIME[0]) & (hod <= DAYTIME[1])


@dataclass
class StratifiedSplit:
    """Assignment of eligible blocks to train (0), validation (1), test (2); -1 elsewhere."""

    fold: int
    seed: int
    proportions: tuple[float, float, float]
    n_strata: int
    assignment: dict[str, np.ndarray]
    strata: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def indices(self, participant_id: str, part: str) -> np.ndarray:
        return np.flatnonzero(self.assignment[participant_id] == PARTS[part])

    def holdout(self, participant_id: str) -> np.ndarray:
        """Blocks never visible while training: validation and test."""
        return self.assignment[participant_id] >= 1


def _allocate(n: int, proportions: Sequence[float]) -> np.ndarray:
    """Largest-remainder split of n items; each count is within 1 of n * p."""
    raw = np.asarray(proportions, dtype=np.float64) * n
    counts = np.floor(raw).astype(np.int64)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def stratified_split(
    cohort: Sequence[ParticipantSeries],
    n_folds: int = 10,
    proportions: tuple[float, float, float] = (0.80, 0.15, 0.05),
    seed: int = 0,
    n_strata: int = 10,
) -> list[StratifiedSplit]:
    """Per-participant stratified random train/validation/test splits.

    Eligible blocks (observed, 6:00-22:00) are sorted by step count, cut into
    ``n_strata`` equal-count strata, and each stratum is divided according to
    ``proportions``. Every fold is an independent draw.
    """
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise ValueError("proportions must sum to 1")
    folds = []
    for fold in range(n_folds):
        assignment, strata = {}, {}
        for i, s in enumerate(cohort):
            rng = np.random.default_rng(np.random.SeedSequence((seed, fold, i)))
            elig = np.flatnonzero(eligible_blocks(s))
            if elig.size < 20:
                warnings.warn(f"{s.participant_id}: only {elig.size} eligible blocks; proportions are best effort", stacklevel=2)
            order = elig[np.lexsort((elig, s.steps[elig]))]
            a = np.full(s.T, -1, dtype=np.int8)
            st = np.full(s.T, -1, dtype=np.int16)
            for k, chunk in enumerate(np.array_split(order, n_strata)):
                if chunk.size == 0:
                    continue
                st[chunk] = k
                perm = rng.permutation(chunk)
                counts = _allocate(chunk.size, proportions)
                a[perm[: counts[0]]] = 0
                a[perm[counts[0] : counts[0] + counts[1]]] = 1
                a[perm[counts[0] + counts[1] :]] = 2
            assignment[s.participant_id] = a
            strata[s.participant_id] = st
        folds.append(StratifiedSplit(fold, seed, tuple(proportions), n_strata, assignment, strata))
    return folds


def write_split_csv(split: StratifiedSplit, path):
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "hour_index", "part", "stratum"])
        names = {v: k for k, v in PARTS.items()}
        for pid, a in split.assignment.items():
            st = split.strata.get(pid)
            for t in np.flatnonzero(a >= 0):
                w.writerow([pid, int(t), names[int(a[t])], -1 if st is None else int(st[t])])


def read_split_csv(path, cohort: Sequence[ParticipantSeries], fold: int = 0, seed: int = 0) -> StratifiedSplit:
    assignment = {s.participant_id: np.full(s.T, -1, dtype=np.int8) for s in cohort}
    strata = {s.participant_id: np.full(s.T, -1, dtype=np.int16) for s in cohort}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["participant_id"]
            assignment[pid][int(row["hour_index"])] = PARTS[row["part"]]
            strata[pid][int(row["hour_index"])] = int(row["stratum"])
    return StratifiedSplit(fold, seed, (0.8, 0.15, 0.05), 10, assignment, strata)


# ----------------------------------------------------------------- binning


def missing_rate(series: ParticipantSeries) -> float:
    """Fraction of 6:00-22:00 blocks with no wear time."""
    hod = series.hour_of_day
    day = (hod >= DAYTIME[0]) & (hod <= DAYTIME[1])
    if not day.any():
        return 0.0
    return float(np.mean(~series.observed[day]))


def missing_rate_bin(rate: float) -> int:
    """Bin 0..4 for [0,.2), [.2,.4), [.4,.6), [.6,.8), [.8,1]; 1.0 joins the top bin."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate {rate} outside [0, 1]")
    return min(int(np.searchsorted(MISSING_RATE_EDGES, rate, side="right")) - 1, 4)


def bin_by_missing_rate(cohort: Sequence[ParticipantSeries]) -> list[list[int]]:
    bins: list[list[int]] = [[] for _ in MISSING_RATE_LABELS]
    for i, s in enumerate(cohort):
        bins[missing_rate_bin(missing_rate(s))].append(i)
    return bins


def step_count_bin(steps) -> np.ndarray:
    """0 for zero steps, then [1,500] -> 1, [501,1000] -> 2, ..."""
    s = np.asarray(steps, dtype=np.float64)
    return np.ceil(s / STEP_BIN_WIDTH).astype(np.int64)


def step_count_bin_breakdown(
    predictions: Mapping[str, Sequence[float]],
    truths: Sequence[float],
    reference: str | None = None,
) -> dict[str, dict[int, dict[str, float]]]:
    """Per ground-truth step-count bin Micro MAE, and ratio to ``reference``.

    Returns ``{method: {bin: {"micro_mae", "n", "ratio"}}}``; bins with no
    blocks are absent.
    """
    truth = np.asarray(truths, dtype=np.float64)
    bins = step_count_bin(truth)
    out: dict[str, dict[int, dict[str, float]]] = {}
    for method, pred in predictions.items():
        ae = np.abs(np.asarray(pred, dtype=np.float64) - truth)
        per = {}
        for b in np.unique(bins):
            sel = bins == b
            per[int(b)] = {"micro_mae": float(ae[sel].mean()), "n": int(sel.sum())}
        out[method] = per
    if reference is not None:
        ref = out[reference]
        for per in out.values():
            for b, d in per.items():
                r = ref[b]["micro_mae"]
                d["ratio"] = d["micro_mae"] / r if r > 0 else (1.0 if d["micro_mae"] == 0 else float("inf"))
    return out


# ---------------------------------------------------------------------- ACF


def participant_acf(series: ParticipantSeries, max_lag: int = 504, min_pairs: int = 30) -> np.ndarray:
    """Pearson autocorrelation of step rates over pairwise-complete pairs, lags 1..max_lag.

    NaN where fewer than ``min_pairs`` pairs exist or either side has no variance.
    """
    x = series.step_rates()
    out = np.full(max_lag, np.nan)
    for k in range(1, min(max_lag, x.size - 1) + 1):
        a, b = x[:-k], x[k:]
        ok = ~(np.isnan(a) | np.isnan(b))
        if ok.sum() < min_pairs:
            continue
        a, b = a[ok], b[ok]
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        a = a - a.mean()
        b = b - b.mean()
        den = math.sqrt(float(a @ a) * float(b @ b))
        if den > 0:
            out[k - 1] = float(np.clip((a @ b) / den, -1.0, 1.0))
    return out


def acf(cohort: Sequence[ParticipantSeries], max_lag: int = 504, min_pairs: int = 30) -> np.ndarray:
    """Median over participants of the per-participant ACF; index k-1 holds lag k."""
    per = np.array([participant_acf(s, max_lag, min_pairs) for s in cohort])
    out = np.full(max_lag, np.nan)
    for k in range(max_lag):
        col = per[:, k]
        col = col[~np.isnan(col)]
        if col.size:
            out[k] = float(np.median(col))
    return out


# ------------------------------------------------------------------- report


@dataclass
class MethodResult:
    overall: Metrics
    ci95: float
    by_missing_bin: dict[str, tuple[float, float, int]]  # label -> (macro MAE, CI, participants)
    by_step_bin: dict[int, dict[str, float]]


@dataclass
class EvalReport:
    methods: dict[str, MethodResult]
    n_blocks: int

    def write_table_csv(self, path):
        """One row per method: Macro MAE and CI per missing-rate bin plus overall."""
        cols = ["method"]
        for lab in MISSING_RATE_LABELS:
            cols += [f"{lab}_macro_mae", f"{lab}_ci95", f"{lab}_participants"]
        cols += ["overall_macro_mae", "overall_ci95", "overall_micro_mae", "overall_macro_rmse", "overall_micro_rmse", "n_blocks"]
        with atomic_open(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for name, r in self.methods.items():
                row = [name]
                for lab in MISSING_RATE_LABELS:
                    m, c, n = r.by_missing_bin.get(lab, (float("nan"), float("nan"), 0))
                    row += [_num(m), _num(c), n]
                o = r.overall
                row += [_num(o.macro_mae), _num(r.ci95), _num(o.micro_mae), _num(o.macro_rmse), _num(o.micro_rmse), o.n_blocks]
                w.writerow(row)

    def write_step_bins_csv(self, path):
        with atomic_open(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "bin", "lower", "upper", "n", "micro_mae", "ratio"])
            for name, r in self.methods.items():
                for b, d in sorted(r.by_step_bin.items()):
                    lo, hi = (0, 0) if b == 0 else ((b - 1) * STEP_BIN_WIDTH + 1, b * STEP_BIN_WIDTH)
                    w.writerow([name, b, lo, hi, d["n"], _num(d["micro_mae"]), _num(d.get("ratio", float("nan")))])

    def write_jsonl(self, path):
        with atomic_open(path) as fh:
            for name, r in self.methods.items():
                rec = {
                    "method": name,
                    "overall": r.overall.__dict__,
                    "ci95": r.ci95,
                    "by_missing_bin": {k: {"macro_mae": v[0], "ci95": v[1], "participants": v[2]} for k, v in r.by_missing_bin.items()},
                    "by_step_bin": {str(k): v for k, v in sorted(r.by_step_bin.items())},
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def build_report(
    truths: Sequence[np.ndarray],
    predictions: Mapping[str, Sequence[np.ndarray]],
    missing_rates: Sequence[float],
    reference: str | None = None,
) -> EvalReport:
    """Assemble per-method results; ``truths[i]`` and ``predictions[m][i]`` belong to participant i."""
    bins = np.array([missing_rate_bin(r) for r in missing_rates])
    flat_truth = np.concatenate([np.asarray(t, float) for t in truths]) if truths else np.zeros(0)
    flat_preds = {m: np.concatenate([np.asarray(p, float) for p in ps]) for m, ps in predictions.items()}
    if reference is None and predictions:
        reference = "attention" if "attention" in predictions else next(iter(predictions))
    step_bins = step_count_bin_breakdown(flat_preds, flat_truth, reference)
    out = {}
    for m, ps in predictions.items():
        errs = [np.asarray(p, float) - np.asarray(t, float) for p, t in zip(ps, truths)]
        overall = metrics(errs)
        per_mae = [np.abs(e).mean() for e in errs if e.size]
        by_bin = {}
        for b, lab in enumerate(MISSING_RATE_LABELS):
            sel = [np.abs(e).mean() for e, bb in zip(errs, bins) if bb == b and e.size]
            if sel:
                by_bin[lab] = (float(np.mean(sel)), ci95(sel), len(sel))
        out[m] = MethodResult(overall, ci95(per_mae), by_bin, step_bins[m])
    return EvalReport(out, int(flat_truth.size))
