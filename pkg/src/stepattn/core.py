"""Domain types and elementary transforms for hourly step-count series.

A participant's data is a dense hourly grid. Hours without any wear time are
kept in the grid with ``wear_minutes == 0``; they are *missing* in the sense
of the response indicator. Everything downstream works on step rates (steps
per worn minute) and converts back to counts through wear time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PERCENTILE_CUTOFF = 0.999
CLIP_FACTOR = 1.5
HOURS_PER_DAY = 24
DAYS_PER_WEEK = 7


class InsufficientDataError(ValueError):
    """Raised when a participant has too little observed data for a statistic."""


@dataclass(frozen=True)
class HourlyBlock:
    steps: int
    wear_minutes: int
    heart_rate: float | None
    day_of_week: int
    hour_of_day: int
    absolute_hour_index: int

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"negative step count {self.steps}")
        if not 0 <= self.wear_minutes <= 60:
            raise ValueError(f"wear_minutes {self.wear_minutes} outside [0, 60]")
        if self.wear_minutes == 0 and (self.steps != 0 or self.heart_rate is not None):
            raise ValueError("a block with zero wear time cannot carry steps or heart rate")
        if self.heart_rate is not None and not self.heart_rate >= 0:
            raise ValueError(f"invalid heart rate {self.heart_rate}")
        if not 0 <= self.day_of_week < DAYS_PER_WEEK:
            raise ValueError(f"day_of_week {self.day_of_week} outside [0, 6]")
        if not 0 <= self.hour_of_day < HOURS_PER_DAY:
            raise ValueError(f"hour_of_day {self.hour_of_day} outside [0, 23]")
        if self.absolute_hour_index < 0:
            raise ValueError("absolute_hour_index must be non-negative")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParticipantSeries:
    """One participant's dense hourly series.

    Stored column-wise. ``heart_rate`` uses NaN for an absent reading.
    ``start_dow``/``start_hod`` give the calendar position of block 0; day of
    week is 0 = Monday.
    """

    participant_id: str
    start_dow: int
    start_hod: int
    steps: np.ndarray
    wear_minutes: np.ndarray
    heart_rate: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps)
        wear = np.asarray(self.wear_minutes)
        hr = np.asarray(self.heart_rate, dtype=np.float64)
        if steps.ndim != 1 or steps.shape != wear.shape or steps.shape != hr.shape:
            raise ValueError("steps, wear_minutes and heart_rate must be 1-D and equal length")
        if steps.size < 1:
            raise ValueError("a series needs at least one block")
        if not (0 <= self.start_dow < 7 and 0 <= self.start_hod < 24):
            raise ValueError("invalid start anchor")
        if np.any(steps < 0):
            raise ValueError("negative step counts")
        if np.any((wear < 0) | (wear > 60)):
            raise ValueError("wear_minutes outside [0, 60]")
        off = wear == 0
        if np.any(steps[off] != 0) or np.any(~np.isnan(hr[off])):
            raise ValueError("blocks with zero wear time cannot carry steps or heart rate")
        if np.any(hr[~np.isnan(hr)] < 0):
            raise ValueError("negative heart rate")
        object.__setattr__(self, "steps", _readonly(steps.astype(np.int64)))
        object.__setattr__(self, "wear_minutes", _readonly(wear.astype(np.int64)))
        object.__setattr__(self, "heart_rate", _readonly(hr))

    @classmethod
    def from_blocks(cls, participant_id: str, blocks: Sequence[HourlyBlock]) -> "ParticipantSeries":
        if not blocks:
            raise ValueError("a series needs at least one block")
        for i, b in enumerate(blocks):
            if b.absolute_hour_index != i:
                raise ValueError(f"block {i} has absolute_hour_index {b.absolute_hour_index}")
        out = cls(
            participant_id,
            blocks[0].day_of_week,
            blocks[0].hour_of_day,
            np.array([b.steps for b in blocks]),
            np.array([b.wear_minutes for b in blocks]),
            np.array([np.nan if b.heart_rate is None else b.heart_rate for b in blocks]),
        )
        if np.any(out.day_of_week != [b.day_of_week for b in blocks]) or np.any(
            out.hour_of_day != [b.hour_of_day for b in blocks]
        ):
            raise ValueError("calendar fields are inconsistent with the start anchor")
        return out

    @property
    def T(self) -> int:
        return int(self.steps.size)

    @property
    def hour_of_day(self) -> np.ndarray:
        return (self.start_hod + np.arange(self.T)) % HOURS_PER_DAY

    @property
    def day_index(self) -> np.ndarray:
        return (self.start_hod + np.arange(self.T)) // HOURS_PER_DAY

    @property
    def day_of_week(self) -> np.ndarray:
        return (self.start_dow + self.day_index) % DAYS_PER_WEEK

    @property
    def observed(self) -> np.ndarray:
        """Response indicator for every block, as a bool array."""
        return self.wear_minutes > 0

    def calendar(self, index) -> tuple[np.ndarray, np.ndarray]:
        """(day_of_week, hour_of_day) for arbitrary, possibly out-of-range, indices."""
        index = np.asarray(index)
        h = self.start_hod + index
        return (self.start_dow + h // HOURS_PER_DAY) % DAYS_PER_WEEK, h % HOURS_PER_DAY

    def block(self, i: int) -> HourlyBlock:
        hr = self.heart_rate[i]
        dow, hod = self.calendar(i)
        return HourlyBlock(
            int(self.steps[i]),
            int(self.wear_minutes[i]),
            None if np.isnan(hr) else float(hr),
            int(dow),
            int(hod),
            int(i),
        )

    @property
    def blocks(self) -> list[HourlyBlock]:
        return [self.block(i) for i in range(self.T)]

    def step_rates(self) -> np.ndarray:
        """Step rate per block, NaN where the block is missing."""
        out = np.full(self.T, np.nan)
        obs = self.observed
        out[obs] = self.steps[obs] / self.wear_minutes[obs]
        return out

    def replace(self, **changes) -> "ParticipantSeries":
        fields_ = dict(
            participant_id=self.participant_id,
            start_dow=self.start_dow,
            start_hod=self.start_hod,
            steps=self.steps,
            wear_minutes=self.wear_minutes,
            heart_rate=self.heart_rate,
        )
        fields_.update(changes)
        return ParticipantSeries(**fields_)

    def __eq__(self, other):
        if not isinstance(other, ParticipantSeries):
            return NotImplemented
        return (
            self.participant_id == other.participant_id
            and self.start_dow == other.start_dow
            and self.start_hod == other.start_hod
            and np.array_equal(self.steps, other.steps)
            and np.array_equal(self.wear_minutes, other.wear_minutes)
            and np.array_equal(self.heart_rate, other.heart_rate, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True)
class NormStats:
    step_rate_mean: float
    step_rate_std: float
    heart_rate_mean: float
    heart_rate_std: float
    max_train_step_rate: float
    percentile_cutoff: float = PERCENTILE_CUTOFF
    degenerate: bool = False
    heart_rate_degenerate: bool = False

    def normalize_rate(self, x):
        return z_normalize(x, self.step_rate_mean, self.step_rate_std)

    def denormalize_rate(self, z):
        return denormalize(z, self.step_rate_mean, self.step_rate_std)

    def normalize_hr(self, x):
        return z_normalize(x, self.heart_rate_mean, self.heart_rate_std)


def response_indicator(block: HourlyBlock) -> int:
    return 1 if block.wear_minutes > 0 else 0


def step_rate(block: HourlyBlock) -> float:
    if block.wear_minutes <= 0:
        raise ValueError("step rate is undefined for a block with zero wear time")
    return block.steps / block.wear_minutes


def as_index_mask(indices, T: int) -> np.ndarray:
    """Turn an iterable of hour indices (or a bool mask) into a bool mask of length T."""
    mask = np.zeros(T, dtype=bool)
    if indices is None:
        return mask
    if isinstance(indices, np.ndarray) and indices.dtype == bool:
        if indices.shape != (T,):
            raise ValueError("boolean holdout mask has the wrong length")
        return indices.copy()
    idx = np.fromiter(indices, dtype=np.int64) if not isinstance(indices, np.ndarray) else indices
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= T):
        raise ValueError("holdout index out of range")
    mask[idx] = True
    return mask


def percentile_cutoff_value(values: np.ndarray, q: float = PERCENTILE_CUTOFF) -> float:
    """Nearest-rank percentile of ``values``."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    rank = max(1, math.ceil(q * v.size))
    return float(v[rank - 1])


def _trimmed_moments(values: np.ndarray) -> tuple[float, float, bool]:
    cut = percentile_cutoff_value(values)
    kept = values[values <= cut]
    mean = float(kept.mean())
    std = float(kept.std())
    if not std > 0:
        return mean, 1.0, True
    return mean, std, False


def compute_norm_stats(series: ParticipantSeries, exclude: Iterable[int] | np.ndarray | None = None) -> NormStats:
    """Per-participant z-normalization statistics.

    Blocks in ``exclude`` (held-out evaluation blocks) are ignored, as are
    values above the 99.9th percentile of their variable. ``max_train_step_rate``
    is the largest visible rate, without trimming.
    """
    hidden = as_index_mask(exclude, series.T)
    visible = series.observed & ~hidden
    if visible.sum() < 2:
        raise InsufficientDataError("insufficient data: fewer than 2 observed blocks")
    rates = series.steps[visible] / series.wear_minutes[visible]
    r_mean, r_std, degenerate = _trimmed_moments(rates)

    hr = series.heart_rate[visible]
    hr = hr[~np.isnan(hr)]
    if hr.size == 0:
        h_mean, h_std, h_deg = 0.0, 1.0, True
    else:
        h_mean, h_std, h_deg = _trimmed_moments(hr)
    return NormStats(
        step_rate_mean=r_mean,
        step_rate_std=r_std,
        heart_rate_mean=h_mean,
        heart_rate_std=h_std,
        max_train_step_rate=float(rates.max()),
        degenerate=degenerate,
        heart_rate_degenerate=h_deg,
    )


def z_normalize(x, mean: float, std: float):
    if not std > 0:
        raise ValueError("standard deviation must be positive")
    return (x - mean) / std


def denormalize(z, mean: float, std: float):
    if not std > 0:
        raise ValueError("standard deviation must be positive")
    return z * std + mean


def clip_rate(predicted_rate, s_max):
    """Limit an unnormalized step rate to [0, 1.5 * s_max]."""
    return np.minimum(CLIP_FACTOR * s_max, np.maximum(0.0, predicted_rate))


def clip_to_step_count(predicted_rate, wear_minutes, s_max):
    """Convert a predicted step rate to a non-negative, capped step count."""
    out = wear_minutes * clip_rate(predicted_rate, s_max)
    if np.ndim(out) == 0:
        return float(out)
    return out
