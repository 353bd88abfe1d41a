"""k-nearest-neighbour imputation on LAPR features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import NormStats, ParticipantSeries, as_index_mask, clip_to_step_count
from ..lapr import LaprContext
from .fills import FillSpec, fill_rates, target_wear

K_GRID = (1, 7, 14, 21, 28, 35)
TAU_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
_CHUNK = 8


@dataclass(frozen=True)
class KnnSpec:
    variant: str = "uniform"
    k: int = 7
    tau: float = 1e-2

    def __post_init__(self):
        if self.variant not in ("uniform", "softmax"):
            raise ValueError(f"unknown kNN variant {self.variant!r}")
        if self.k < 1:
            raise ValueError("k must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @classmethod
    def parse(cls, text: str) -> "KnnSpec":
        """``knn:uniform:7`` or ``knn:softmax:7:0.01`` (leading ``knn:`` optional)."""
        parts = text.split(":")
        if parts[0] == "knn":
            parts = parts[1:]
        variant = parts[0] if parts else "uniform"
        k = int(parts[1]) if len(parts) > 1 else 7
        tau = float(parts[2]) if len(parts) > 2 else 1e-2
        return cls(variant, k, tau)

    def __str__(self):
        if self.variant == "uniform":
            return f"knn:uniform:{self.k}"
        return f"knn:softmax:{self.k}:{self.tau!r}"


def neighbor_weights(distances: np.ndarray, variant: str, tau: float) -> np.ndarray:
    """Weights over one neighbour set (sorted or not); they sum to 1.

    Softmax uses exp(-(B - B_min) / tau), so closer neighbours weigh more.
    """
    d = np.asarray(distances, dtype=np.float64)
    if variant == "uniform":
        return np.full(d.shape, 1.0 / d.shape[-1])
    e = np.exp(-(d - d.min(axis=-1, keepdims=True)) / tau)
    return e / e.sum(axis=-1, keepdims=True)


def nearest(distances: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest distances per row; ties go to the lower index."""
    order = np.argsort(distances, axis=-1, kind="stable")
    return order[..., :k]


def knn_rates(series: ParticipantSeries, targets, spec: KnnSpec, holdout, stats: NormStats) -> np.ndarray:
    """Predicted (unclipped) step rates for the targets; NaN where the pool is empty.

    The pool is every visible block of the participant; targets and held-out
    blocks are hidden from both the pool and the LAPR features.
    """
    targets = np.asarray(targets, dtype=np.int64)
    hidden = as_index_mask(holdout, series.T)
    hidden[targets] = True
    ctx = LaprContext(series, stats, hidden)
    pool = np.flatnonzero(ctx.visible)
    out = np.full(targets.size, np.nan)
    if pool.size == 0 or targets.size == 0:
        return out
    feats = ctx.rows(pool)
    rates = series.steps[pool] / series.wear_minutes[pool]
    q_all = ctx.rows(targets)
    k = min(spec.k, pool.size)
    for i in range(0, targets.size, _CHUNK):
        q = q_all[i : i + _CHUNK]
        d = np.sum((feats[None, :, :] - q[:, None, :]) ** 2, axis=-1)
        nn_idx = nearest(d, k)
        w = neighbor_weights(np.take_along_axis(d, nn_idx, axis=1), spec.variant, spec.tau)
        out[i : i + _CHUNK] = np.sum(w * rates[nn_idx], axis=1)
    return out


def knn_impute_many(series, targets, spec: KnnSpec, holdout, stats: NormStats, wear_minutes=None, s_max=None) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    rates = knn_rates(series, targets, spec, holdout, stats)
    if np.isnan(rates).any():
        hidden = as_index_mask(holdout, series.T)
        hidden[targets] = True
        fb = fill_rates(series, FillSpec("median", "dw_hd"), hidden)[targets]
        rates = np.where(np.isnan(rates), fb, rates)
    s_max = stats.max_train_step_rate if s_max is None else s_max
    return clip_to_step_count(rates, target_wear(series, targets, wear_minutes), s_max)


def knn_impute(series, t: int, spec: KnnSpec | str, holdout, stats: NormStats, wear_minutes=None) -> float:
    """Step count for block ``t``."""
    if isinstance(spec, str):
        spec = KnnSpec.parse(spec)
    w = None if wear_minutes is None else [wear_minutes]
    return float(knn_impute_many(series, [t], spec, holdout, stats, w)[0])
