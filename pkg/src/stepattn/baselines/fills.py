"""Personal filling baselines.

All fills work on unnormalized step rates of a single participant. Held-out
blocks never contribute to a statistic. Statistic-based fills (mean, micro
mean, median) use only 6:00-22:00 blocks unless told otherwise; forward and
backward fills walk over every hour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import InsufficientDataError, ParticipantSeries, as_index_mask, clip_to_step_count

FILL_METHODS = ("zero", "forward", "backward", "avg_fb", "mean", "micro_mean", "median")
STAT_METHODS = ("mean", "micro_mean", "median")
FACTORS = ("participant", "day_of_week", "hour_of_day", "dw_hd")
DAYTIME_HOURS = (6, 22)
MISSING_BLOCK_WEAR = 60


@dataclass(frozen=True)
class FillSpec:
    method: str
    factor: str = "participant"

    def __post_init__(self):
        if self.method not in FILL_METHODS:
            raise ValueError(f"unknown fill method {self.method!r}")
        if self.factor not in FACTORS:
            raise ValueError(f"unknown fill factor {self.factor!r}")
        if self.method not in STAT_METHODS and self.factor != "participant":
            raise ValueError(f"{self.method} fill takes no factor")

    @classmethod
    def parse(cls, text: str) -> "FillSpec":
        """``"median:dw_hd"`` -> FillSpec("median", "dw_hd")."""
        method, _, factor = text.partition(":")
        return cls(method, factor or "participant")

    def __str__(self):
        return self.method if self.method not in STAT_METHODS else f"{self.method}:{self.factor}"


def factor_cells(series: ParticipantSeries, factor: str, index=None) -> tuple[np.ndarray, int]:
    """Cell id of each block under ``factor`` and the number of cells."""
    if index is None:
        dow, hod = series.day_of_week, series.hour_of_day
    else:
        dow, hod = series.calendar(index)
    if factor == "participant":
        return np.zeros(np.shape(dow), dtype=np.int64), 1
    if factor == "day_of_week":
        return np.asarray(dow, dtype=np.int64), 7
    if factor == "hour_of_day":
        return np.asarray(hod, dtype=np.int64), 24
    if factor == "dw_hd":
        return np.asarray(dow * 24 + hod, dtype=np.int64), 168
    raise ValueError(f"unknown fill factor {factor!r}")


def _hour_filter(series: ParticipantSeries, hours) -> np.ndarray:
    if hours is None:
        return np.ones(series.T, dtype=bool)
    lo, hi = hours
    hod = series.hour_of_day
    return (hod >= lo) & (hod <= hi)


def visible_mask(series: ParticipantSeries, holdout=None) -> np.ndarray:
    return series.observed & ~as_index_mask(holdout, series.T)


def participant_median(series: ParticipantSeries, holdout=None, hours=DAYTIME_HOURS) -> float:
    sel = visible_mask(series, holdout) & _hour_filter(series, hours)
    if not sel.any():
        raise InsufficientDataError(f"{series.participant_id}: no observed blocks to compute a median from")
    return float(np.median(series.steps[sel] / series.wear_minutes[sel]))


def _grouped_median(cells: np.ndarray, values: np.ndarray, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((values, cells))
    c, v = cells[order], values[order]
    counts = np.bincount(c, minlength=n_cells)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    has = counts > 0
    lo = starts + (counts - 1) // 2
    hi = starts + counts // 2
    med = np.zeros(n_cells)
    med[has] = 0.5 * (v[lo[has]] + v[hi[has]])
    return med, has


def factor_table(
    series: ParticipantSeries,
    method: str,
    factor: str,
    holdout=None,
    hours=DAYTIME_HOURS,
    fallback: float | None = None,
) -> np.ndarray:
    """Per-cell fill rate under ``factor``.

    Cells without visible data take the participant median (or ``fallback``
    when given).
    """
    sel = visible_mask(series, holdout) & _hour_filter(series, hours)
    cells, n = factor_cells(series, factor)
    c = cells[sel]
    steps = series.steps[sel].astype(np.float64)
    wear = series.wear_minutes[sel].astype(np.float64)
    counts = np.bincount(c, minlength=n)
    has = counts > 0
    table = np.zeros(n)
    if method == "mean":
        sums = np.bincount(c, weights=steps / wear, minlength=n)
        table[has] = sums[has] / counts[has]
    elif method == "micro_mean":
        s = np.bincount(c, weights=steps, minlength=n)
        w = np.bincount(c, weights=wear, minlength=n)
        table[has] = s[has] / w[has]
    elif method == "median":
        table, has = _grouped_median(c, steps / wear, n)
    else:
        raise ValueError(f"{method!r} is not a statistic fill")
    if not has.all():
        table[~has] = participant_median(series, holdout, hours) if fallback is None else fallback
    return table


def dw_hd_median_table(series: ParticipantSeries, holdout=None, hours=None) -> np.ndarray:
    """(7, 24) DW+HD median step rates with the chain DW+HD -> participant -> 0.

    Used to fill LAPR inputs; by default every hour of the day contributes.
    """
    try:
        fb = participant_median(series, holdout, hours)
    except InsufficientDataError:
        fb = 0.0
    return factor_table(series, "median", "dw_hd", holdout, hours, fallback=fb).reshape(7, 24)


def _directional_fill(observed: np.ndarray, rates: np.ndarray, forward: bool) -> np.ndarray:
    """Rate of the nearest observed block strictly before (forward) or after each block; NaN if none."""
    T = observed.size
    idx = np.where(observed, np.arange(T), -1 if forward else T)
    if forward:
        last = np.maximum.accumulate(idx)
        prev = np.concatenate([[-1], last[:-1]])
        ok = prev >= 0
    else:
        nxt = np.minimum.accumulate(idx[::-1])[::-1]
        prev = np.concatenate([nxt[1:], [T]])
        ok = prev < T
    out = np.full(T, np.nan)
    out[ok] = rates[prev[ok]]
    return out


def fill_rates(series: ParticipantSeries, spec: FillSpec, holdout=None, hours=DAYTIME_HOURS) -> np.ndarray:
    """Fill step rate for every block of the series under ``spec``.

    Forward and backward fills may read other held-out blocks (they are only
    barred from the block being filled); leftovers fall back to the
    participant median.
    """
    visible = visible_mask(series, holdout)
    if not visible.any():
        raise InsufficientDataError(f"{series.participant_id}: participant has no observed data")
    if spec.method == "zero":
        return np.zeros(series.T)
    if spec.method in STAT_METHODS:
        cells, _ = factor_cells(series, spec.factor)
        return factor_table(series, spec.method, spec.factor, holdout, hours)[cells]
    obs = series.observed
    rates = np.where(obs, series.steps / np.maximum(series.wear_minutes, 1), 0.0)
    med = participant_median(series, holdout, hours)
    fwd = _directional_fill(obs, rates, forward=True)
    bwd = _directional_fill(obs, rates, forward=False)
    if spec.method == "forward":
        out = fwd
    elif spec.method == "backward":
        out = bwd
    else:
        out = np.where(np.isnan(fwd), bwd, np.where(np.isnan(bwd), fwd, 0.5 * (fwd + bwd)))
    return np.where(np.isnan(out), med, out)


def max_visible_rate(series: ParticipantSeries, holdout=None) -> float:
    vis = visible_mask(series, holdout)
    if not vis.any():
        raise InsufficientDataError(f"{series.participant_id}: participant has no observed data")
    return float(np.max(series.steps[vis] / series.wear_minutes[vis]))


def target_wear(series: ParticipantSeries, targets: np.ndarray, wear_minutes=None) -> np.ndarray:
    """Wear time used to turn a rate into a count: the block's own, or 60 if it was never observed."""
    if wear_minutes is not None:
        w = np.asarray(wear_minutes, dtype=np.float64)
        if w.shape != targets.shape:
            raise ValueError("wear_minutes must align with the targets")
        return w
    w = series.wear_minutes[targets].astype(np.float64)
    return np.where(w > 0, w, float(MISSING_BLOCK_WEAR))


def holdout_targets(series: ParticipantSeries, holdout) -> np.ndarray:
    return np.flatnonzero(as_index_mask(holdout, series.T))


def fill_impute(series: ParticipantSeries, spec: FillSpec | str, holdout, wear_minutes=None, s_max=None) -> np.ndarray:
    """Predicted step counts for the held-out blocks, in ascending hour order."""
    if isinstance(spec, str):
        spec = FillSpec.parse(spec)
    targets = holdout_targets(series, holdout)
    rates = fill_rates(series, spec, holdout)[targets]
    if s_max is None:
        s_max = max_visible_rate(series, holdout)
    return clip_to_step_count(rates, target_wear(series, targets, wear_minutes), s_max)
