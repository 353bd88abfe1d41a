"""Chained-equation iterative imputation over the 9 x 23 window.

Every one of the 207 grid positions (including the target at the centre)
gets its own linear regression on the other 206 positions plus the target's
calendar one-hots. Missing positions start at zero and are re-imputed in an
order that alternates between the two ends of the flattened grid, so the
centre comes last. Inference draws Gaussian residual noise per position and
averages several such chains.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import SGDRegressor

from ..core import InsufficientDataError, NormStats, ParticipantSeries, as_index_mask, compute_norm_stats
from ..window import GRID_OFFSETS
from .fills import target_wear
from .regression import normalized_columns

N_POS = GRID_OFFSETS.size  # 207
CENTER_POS = N_POS // 2  # 103
N_CAL = 7 + 24
N_ITER = 2
N_SAMPLES = 5


def imputation_order(n: int = N_POS) -> np.ndarray:
    """0, n-1, 1, n-2, ...: alternates between the ends and finishes in the middle."""
    lo, hi = 0, n - 1
    out = []
    while lo <= hi:
        out.append(lo)
        if hi != lo:
            out.append(hi)
        lo, hi = lo + 1, hi - 1
    return np.array(out, dtype=np.int64)


def window_matrix(series: ParticipantSeries, targets, stats: NormStats, hidden) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened grid values (n, 207), their observed mask and the calendar one-hots (n, 31).

    The centre is always marked unobserved. Unobserved values are 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    visible, rate_z, _ = normalized_columns(series, stats, hidden)
    idx = targets[:, None] + GRID_OFFSETS.ravel()[None, :]
    ok = (idx >= 0) & (idx < series.T)
    idx = np.where(ok, idx, 0)
    obs = ok & visible[idx]
    obs[:, CENTER_POS] = False
    vals = np.where(obs, rate_z[idx], 0.0)
    dow, hod = series.calendar(targets)
    cal = np.concatenate([np.eye(7)[dow], np.eye(24)[hod]], axis=1)
    return vals, obs, cal


@dataclass
class IterativeImputer:
    """weights[i] maps (other 206 positions, 31 calendar one-hots) to position i."""

    weights: np.ndarray  # (207, 206 + 31)
    bias: np.ndarray  # (207,)
    sigma2: np.ndarray  # (207,)
    order: np.ndarray
    n_iter: int = N_ITER

    def __post_init__(self):
        if np.any(self.sigma2 < 0):
            raise ValueError("residual variances must be non-negative")
        if self.order[-1] != CENTER_POS or sorted(self.order.tolist()) != list(range(N_POS)):
            raise ValueError("order must be a permutation of the grid ending at the centre")

    def predict_position(self, i: int, vals: np.ndarray, cal: np.ndarray) -> np.ndarray:
        w = self.weights[i]
        others = np.delete(vals, i, axis=1)
        return others @ w[: N_POS - 1] + cal @ w[N_POS - 1 :] + self.bias[i]

    def save(self, path):
        np.savez(path, weights=self.weights, bias=self.bias, sigma2=self.sigma2, order=self.order, n_iter=self.n_iter)

    @classmethod
    def load(cls, path) -> "IterativeImputer":
        with np.load(path) as z:
            return cls(z["weights"], z["bias"], z["sigma2"], z["order"], int(z["n_iter"]))


def clamp_bounds(stats: NormStats) -> tuple[float, float]:
    """Normalized values of rate 0 and of rate 1.5 * s_max."""
    lo = stats.normalize_rate(0.0)
    hi = stats.normalize_rate(1.5 * stats.max_train_step_rate)
    return float(lo), float(hi)


def chain(
    imp: IterativeImputer,
    vals: np.ndarray,
    obs: np.ndarray,
    cal: np.ndarray,
    lo,
    hi,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run ``imp.n_iter`` sweeps, writing clamped predictions into the missing cells.

    ``lo`` and ``hi`` may be per-row arrays. Noise is drawn only when ``rng``
    is given; one draw of size n per visited position keeps replays exact.
    """
    x = np.where(obs, vals, 0.0)
    lo = np.broadcast_to(lo, x.shape[:1])
    hi = np.broadcast_to(hi, x.shape[:1])
    for _ in range(imp.n_iter):
        for i in imp.order:
            miss = ~obs[:, i]
            if not miss.any():
                if rng is not None:
                    rng.normal(0.0, 1.0, x.shape[0])
                continue
            p = imp.predict_position(i, x, cal)
            if rng is not None:
                p = p + np.sqrt(imp.sigma2[i]) * rng.normal(0.0, 1.0, x.shape[0])
            x[miss, i] = np.clip(p[miss], lo[miss], hi[miss])
    return x


def _participant_rng(seed: int, participant_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(participant_id.encode()))))


def iterative_samples(
    imp: IterativeImputer,
    series: ParticipantSeries,
    targets,
    holdout,
    stats: NormStats,
    n_samples: int = N_SAMPLES,
    seed: int = 0,
    wear_minutes=None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-sample step counts, shape (n_samples, n_targets)."""
    targets = np.asarray(targets, dtype=np.int64)
    hidden = as_index_mask(holdout, series.T)
    hidden[targets] = True
    vals, obs, cal = window_matrix(series, targets, stats, hidden)
    lo, hi = clamp_bounds(stats)
    wear = target_wear(series, targets, wear_minutes)
    rng = rng if rng is not None else _participant_rng(seed, series.participant_id)
    out = np.empty((n_samples, targets.size))
    for s in range(n_samples):
        x = chain(imp, vals, obs, cal, lo, hi, rng)
        out[s] = stats.denormalize_rate(x[:, CENTER_POS]) * wear
    return np.maximum(out, 0.0)


def iterative_infer_many(imp, series, targets, holdout, stats, n_samples: int = N_SAMPLES, seed: int = 0, wear_minutes=None) -> np.ndarray:
    """Mean over ``n_samples`` noisy chains of the centre step count."""
    return np.mean(iterative_samples(imp, series, targets, holdout, stats, n_samples, seed, wear_minutes), axis=0)


def iterative_infer(imp, series, t: int, holdout, stats, n_samples: int = N_SAMPLES, seed: int = 0, wear_minutes=None) -> float:
    w = None if wear_minutes is None else [wear_minutes]
    return float(iterative_infer_many(imp, series, [t], holdout, stats, n_samples, seed, w)[0])


def iterative_predict_deterministic(imp, series, targets, holdout, stats, wear_minutes=None) -> np.ndarray:
    """Noise-free chained prediction of the centre step count."""
    targets = np.asarray(targets, dtype=np.int64)
    hidden = as_index_mask(holdout, series.T)
    hidden[targets] = True
    vals, obs, cal = window_matrix(series, targets, stats, hidden)
    lo, hi = clamp_bounds(stats)
    x = chain(imp, vals, obs, cal, lo, hi)
    return np.maximum(stats.denormalize_rate(x[:, CENTER_POS]) * target_wear(series, targets, wear_minutes), 0.0)


def _stack(cohort, split, part: str):
    V, O, C, LO, HI, Y = [], [], [], [], [], []
    for s in cohort:
        hold = split.holdout(s.participant_id)
        try:
            st = compute_norm_stats(s, exclude=hold)
        except InsufficientDataError:
            continue
        tg = split.indices(s.participant_id, part)
        if tg.size == 0:
            continue
        v, o, c = window_matrix(s, tg, st, hold)
        lo, hi = clamp_bounds(st)
        V.append(v)
        O.append(o)
        C.append(c)
        LO.append(np.full(tg.size, lo))
        HI.append(np.full(tg.size, hi))
        Y.append(st.normalize_rate(s.steps[tg] / s.wear_minutes[tg]))
    if not V:
        raise ValueError(f"empty {part} set")
    cat = np.concatenate
    return cat(V), cat(O), cat(C), cat(LO), cat(HI), cat(Y)


def iterative_fit(
    cohort,
    split,
    n_iter: int = N_ITER,
    batch_size: int = 10000,
    epochs: int = 2,
    epsilon: float = 0.01,
    alpha: float = 1e-4,
    eta0: float = 1e-3,
    seed: int = 0,
) -> IterativeImputer:
    """Deterministic chained training followed by residual-variance estimation on validation.

    The centre of each training window is learned from the block's true rate
    but is imputed, never observed, as an input to the other positions.
    """
    vals, obs, cal, lo, hi, y = _stack(cohort, split, "train")
    n = vals.shape[0]
    order = imputation_order()
    regs = [
        SGDRegressor(
            loss="epsilon_insensitive", epsilon=epsilon, penalty="l2", alpha=alpha,
            learning_rate="invscaling", eta0=eta0, random_state=seed,
        )
        for _ in range(N_POS)
    ]
    target = vals.copy()
    target[:, CENTER_POS] = y
    tmask = obs.copy()
    tmask[:, CENTER_POS] = True
    weights = np.zeros((N_POS, N_POS - 1 + N_CAL))
    bias = np.zeros(N_POS)
    imp = IterativeImputer(weights, bias, np.zeros(N_POS), order, n_iter)
    x = np.where(obs, vals, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x17E)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(n_iter):
            for i in order:
                rows = np.flatnonzero(tmask[:, i])
                if rows.size:
                    feats = np.concatenate([np.delete(x[rows], i, axis=1), cal[rows]], axis=1)
                    for _ep in range(epochs):
                        perm = rng.permutation(rows.size)
                        for b in range(0, rows.size, batch_size):
                            sel = perm[b : b + batch_size]
                            regs[i].partial_fit(feats[sel], target[rows[sel], i])
                    weights[i] = regs[i].coef_
                    bias[i] = regs[i].intercept_[0]
                miss = ~obs[:, i]
                if miss.any():
                    p = imp.predict_position(i, x[miss], cal[miss])
                    x[miss, i] = np.clip(p, lo[miss], hi[miss])
    imp.sigma2 = residual_variances(imp, *_stack(cohort, split, "validation"))
    return imp


def residual_variances(imp: IterativeImputer, vals, obs, cal, lo, hi, y) -> np.ndarray:
    """Mean squared error of each position's regression on held-out windows.

    Positions are scored where their true value is known: observed cells, and
    the centre against the target's true rate.
    """
    x = chain(imp, vals, obs, cal, lo, hi)
    truth = vals.copy()
    truth[:, CENTER_POS] = y
    known = obs.copy()
    known[:, CENTER_POS] = True
    sigma2 = np.zeros(N_POS)
    for i in range(N_POS):
        rows = known[:, i]
        if rows.any():
            p = imp.predict_position(i, x[rows], cal[rows])
            sigma2[i] = float(np.mean((p - truth[rows, i]) ** 2))
    return sigma2
