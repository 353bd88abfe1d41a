"""Linear regression imputation from the raw context window.

Features per target: normalized step rates and heart rates of the 206
context cells (zero where the cell is missing, hidden or off the series),
then the target's day-of-week and hour-of-day one-hots: 443 values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..core import InsufficientDataError, NormStats, ParticipantSeries, as_index_mask, clip_rate, compute_norm_stats
from ..window import N_CELLS, window_indices
from .fills import FillSpec, fill_rates, target_wear

N_FEATURES = 2 * N_CELLS + 7 + 24


def normalized_columns(series: ParticipantSeries, stats: NormStats, hidden) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(visible, rate_z, hr_z) per block; hidden or missing entries are 0."""
    visible = series.observed & ~as_index_mask(hidden, series.T)
    rate = np.where(visible, series.steps / np.maximum(series.wear_minutes, 1), 0.0)
    rate_z = np.where(visible, stats.normalize_rate(rate), 0.0)
    hr_ok = visible & ~np.isnan(series.heart_rate)
    hr_z = np.where(hr_ok, stats.normalize_hr(np.where(hr_ok, series.heart_rate, 0.0)), 0.0)
    return visible, rate_z, hr_z


def regression_features(series: ParticipantSeries, targets, stats: NormStats, hidden) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix (n, 443) and whether each target has any visible context cell."""
    targets = np.asarray(targets, dtype=np.int64)
    visible, rate_z, hr_z = normalized_columns(series, stats, hidden)
    idx, valid = window_indices(targets, series.T)
    m = valid & visible[idx]
    dow, hod = series.calendar(targets)
    X = np.concatenate(
        [np.where(m, rate_z[idx], 0.0), np.where(m, hr_z[idx], 0.0), np.eye(7)[dow], np.eye(24)[hod]],
        axis=1,
    )
    return X, m.any(axis=1)


@dataclass
class RegressionModel:
    weight: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls) -> "RegressionModel":
        return cls(np.zeros(N_FEATURES), 0.0)


def _predict_rates(model: RegressionModel, X: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.denormalize_rate(X @ model.weight + model.bias)


def regression_predict_many(model: RegressionModel, series, targets, holdout, stats: NormStats, wear_minutes=None) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    hidden = as_index_mask(holdout, series.T)
    hidden[targets] = True
    X, has = regression_features(series, targets, stats, hidden)
    rates = _predict_rates(model, X, stats)
    if not has.all():
        rates = np.where(has, rates, fill_rates(series, FillSpec("median", "dw_hd"), hidden)[targets])
    return target_wear(series, targets, wear_minutes) * clip_rate(rates, stats.max_train_step_rate)


def regression_predict(model: RegressionModel, series, t: int, holdout, stats: NormStats, wear_minutes=None) -> float:
    w = None if wear_minutes is None else [wear_minutes]
    return float(regression_predict_many(model, series, [t], holdout, stats, w)[0])


@dataclass
class _Design:
    X: np.ndarray
    wear: np.ndarray
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    cap: np.ndarray  # 1.5 * s_max


def _design(cohort, split, part: str) -> _Design:
    Xs, wear, steps, mean, std, cap = [], [], [], [], [], []
    for s in cohort:
        hold = split.holdout(s.participant_id)
        try:
            st = compute_norm_stats(s, exclude=hold)
        except InsufficientDataError:
            continue
        tg = split.indices(s.participant_id, part)
        if tg.size == 0:
            continue
        X, _ = regression_features(s, tg, st, hold)
        Xs.append(X)
        wear.append(s.wear_minutes[tg].astype(np.float64))
        steps.append(s.steps[tg].astype(np.float64))
        for lst, v in ((mean, st.step_rate_mean), (std, st.step_rate_std), (cap, 1.5 * st.max_train_step_rate)):
            lst.append(np.full(tg.size, v))
    if not Xs:
        raise ValueError(f"empty {part} set")
    cat = np.concatenate
    return _Design(cat(Xs), cat(wear), cat(steps), cat(mean), cat(std), cat(cap))


def _loss(model: RegressionModel, d: _Design, sl=slice(None)):
    z = d.X[sl] @ model.weight + model.bias
    rate = d.mean[sl] + d.std[sl] * z
    pred = d.wear[sl] * np.minimum(d.cap[sl], np.maximum(0.0, rate))
    err = pred - d.steps[sl]
    inside = (rate > 0) & (rate < d.cap[sl])
    dz = np.where(inside, np.sign(err) * d.wear[sl] * d.std[sl], 0.0) / err.size
    return float(np.abs(err).mean()), dz


def regression_fit(cohort, split, lr: float = 1e-3, batch_size: int = 50000, epochs: int = 20, seed: int = 0):
    """Adam on mean absolute step-count error, starting from zero weights.

    Returns ``(model, history)`` where history holds the training MAE before
    each epoch and after the last.
    """
    d = _design(cohort, split, "train")
    w = nn.ParamTensor("weight", np.zeros(N_FEATURES))
    b = nn.ParamTensor("bias", np.zeros(1))
    opt = nn.Adam(lr)
    model = RegressionModel(w.values, 0.0)
    history = []
    n = d.X.shape[0]
    for epoch in range(epochs):
        model.bias = float(b.values[0])
        history.append(_loss(model, d)[0])
        perm = np.random.default_rng(np.random.SeedSequence((seed, epoch))).permutation(n)
        for i in range(0, n, batch_size):
            sl = np.sort(perm[i : i + batch_size])
            model.bias = float(b.values[0])
            _, dz = _loss(model, d, sl)
            w.grad += d.X[sl].T @ dz
            b.grad += dz.sum()
            opt.step([w, b])
    model.bias = float(b.values[0])
    history.append(_loss(model, d)[0])
    return RegressionModel(w.values.copy(), model.bias), history
