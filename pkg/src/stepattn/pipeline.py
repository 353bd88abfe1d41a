"""Method dispatch shared by the command line and the end-to-end checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .baselines.fills import FILL_METHODS, FillSpec, fill_rates, target_wear
from .baselines.iterative import IterativeImputer, iterative_fit, iterative_infer_many
from .baselines.knn import KnnSpec, knn_impute_many
from .baselines.regression import RegressionModel, regression_fit, regression_predict_many
from .core import InsufficientDataError, ParticipantSeries, as_index_mask, clip_to_step_count, compute_norm_stats
from .evaluation import DAYTIME, StratifiedSplit, build_report, missing_rate
from .model import AttentionModel, ensemble_predict, predict_targets

TRAINED = ("regression", "iterative", "attention")


def validate_method(name: str) -> str:
    """Canonical method name; raises ValueError for unknown names."""
    if name in TRAINED:
        return name
    if name.startswith("knn"):
        return str(KnnSpec.parse(name))
    if name.split(":")[0] in FILL_METHODS:
        return str(FillSpec.parse(name))
    raise ValueError(f"unknown method {name!r}")


@dataclass
class Fitted:
    """Trained models available to :func:`predict_method`."""

    attention: AttentionModel | list[AttentionModel] | None = None  # a list is averaged
    regression: RegressionModel | None = None
    iterative: IterativeImputer | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)


def fit_baselines(methods: Sequence[str], cohort, split: StratifiedSplit, fitted: Fitted) -> Fitted:
    if "regression" in methods and fitted.regression is None:
        fitted.regression = regression_fit(cohort, split, seed=fitted.seed)[0]
    if "iterative" in methods and fitted.iterative is None:
        fitted.iterative = iterative_fit(cohort, split, seed=fitted.seed)
    return fitted


def predict_method(method: str, series: ParticipantSeries, targets, holdout, fitted: Fitted, wear_minutes=None) -> np.ndarray:
    """Step-count predictions for ``targets``; statistics come from non-held-out blocks only."""
    targets = np.asarray(targets, dtype=np.int64)
    hidden = as_index_mask(holdout, series.T)
    hidden[targets] = True
    stats = compute_norm_stats(series, exclude=hidden)
    if method == "attention":
        if fitted.attention is None:
            raise ValueError("attention needs a trained model")
        if isinstance(fitted.attention, list):
            return ensemble_predict(fitted.attention, series, targets, hidden, stats, wear_minutes)
        return predict_targets(fitted.attention, series, targets, hidden, stats, wear_minutes)
    if method == "regression":
        return regression_predict_many(fitted.regression, series, targets, hidden, stats, wear_minutes)
    if method == "iterative":
        return iterative_infer_many(fitted.iterative, series, targets, hidden, stats, seed=fitted.seed, wear_minutes=wear_minutes)
    if method.startswith("knn"):
        return knn_impute_many(series, targets, KnnSpec.parse(method), hidden, stats, wear_minutes)
    spec = FillSpec.parse(method)
    rates = fill_rates(series, spec, hidden)[targets]
    return clip_to_step_count(rates, target_wear(series, targets, wear_minutes), stats.max_train_step_rate)


@dataclass
class EvalTargets:
    """Per participant: blocks to score, their true steps and wear, and what to hide."""

    series: list[ParticipantSeries]
    targets: list[np.ndarray]
    truth: list[np.ndarray]
    wear: list[np.ndarray]
    holdout: list[np.ndarray]


def split_test_targets(cohort: Sequence[ParticipantSeries], split: StratifiedSplit) -> EvalTargets:
    """Score the split's test blocks against their observed steps."""
    out = EvalTargets([], [], [], [], [])
    for s in cohort:
        tg = split.indices(s.participant_id, "test")
        out.series.append(s)
        out.targets.append(tg)
        out.truth.append(s.steps[tg].astype(np.float64))
        out.wear.append(s.wear_minutes[tg].astype(np.float64))
        out.holdout.append(split.holdout(s.participant_id))
    return out


def masked_targets(cohort, truth: Sequence[ParticipantSeries], masks: Sequence[np.ndarray], split: StratifiedSplit | None = None) -> EvalTargets:
    """Score artificially masked daytime blocks against the unmasked ground truth."""
    out = EvalTargets([], [], [], [], [])
    by_id = {t.participant_id: (t, m) for t, m in zip(truth, masks)}
    for s in cohort:
        t, m = by_id[s.participant_id]
        hod = s.hour_of_day
        tg = np.flatnonzero(m & (hod >= DAYTIME[0]) & (hod <= DAYTIME[1]) & (t.wear_minutes > 0))
        out.series.append(s)
        out.targets.append(tg)
        out.truth.append(t.steps[tg].astype(np.float64))
        out.wear.append(t.wear_minutes[tg].astype(np.float64))
        out.holdout.append(split.holdout(s.participant_id) if split is not None else np.zeros(s.T, dtype=bool))
    return out


def evaluate_methods(methods: Sequence[str], ev: EvalTargets, fitted: Fitted, reference: str | None = None):
    """Predict every method on the evaluation targets and build the report.

    Participants whose visible data cannot support normalization are skipped.
    Returns ``(report, predictions, kept)``; predictions[method][j] belongs to
    participant ``kept[j]``.
    """
    keep = []
    for i, s in enumerate(ev.series):
        hidden = ev.holdout[i].copy()
        hidden[ev.targets[i]] = True
        try:
            compute_norm_stats(s, exclude=hidden)
        except InsufficientDataError:
            continue
        keep.append(i)
    preds: dict[str, list[np.ndarray]] = {}
    for m in methods:
        preds[m] = [predict_method(m, ev.series[i], ev.targets[i], ev.holdout[i], fitted, ev.wear[i]) for i in keep]
    truths = [ev.truth[i] for i in keep]
    rates = [missing_rate(ev.series[i]) for i in keep]
    if reference is None:
        reference = "median:dw_hd" if "median:dw_hd" in preds else None
    return build_report(truths, preds, rates, reference), preds, keep


def predictions_rows(methods: Sequence[str], ev: EvalTargets, preds: Mapping[str, list[np.ndarray]], keep=None):
    """Rows of ``participant_id,hour_index,method,predicted_steps,true_steps``."""
    idx = range(len(ev.series)) if keep is None else keep
    for m in methods:
        for j, i in enumerate(idx):
            pid = ev.series[i].participant_id
            for t, p, y in zip(ev.targets[i], preds[m][j], ev.truth[i]):
                yield [pid, int(t), m, f"{p:.6f}", "" if np.isnan(y) else f"{y:.0f}"]
