"""Getting hourly series in and out: minute rollup, day-of-week alignment,
CSV files, and a seeded synthetic cohort standing in for real wearable data."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_open
from .core import DAYS_PER_WEEK, HOURS_PER_DAY, ParticipantSeries

HOURLY_COLUMNS = ["participant_id", "day_index", "day_of_week", "hour_of_day", "steps", "wear_minutes", "heart_rate"]
TRUTH_COLUMNS = HOURLY_COLUMNS + ["was_masked"]
MINUTE_COLUMNS = ["participant_id", "minute_index", "steps", "heart_rate"]

# minute 0 of the Unix epoch fell on a Thursday (Monday = 0)
EPOCH_DAY_OF_WEEK = 3


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class MinuteRecord:
    participant_id: str
    timestamp: int
    steps: int
    heart_rate: float | None = None


def rollup_minutes_to_hours(records: Sequence[MinuteRecord], epoch_dow: int = EPOCH_DAY_OF_WEEK) -> ParticipantSeries:
    """Aggregate minute records of one participant into a dense hourly series.

    Each hour gets the total steps, the mean heart rate over minutes that
    report one, and the number of minutes with any record as wear time.
    ``epoch_dow`` is the day of week of minute 0 (midnight).
    """
    if not records:
        raise DataError("no minute records to roll up")
    pids = {r.participant_id for r in records}
    if len(pids) != 1:
        raise DataError(f"rollup expects a single participant, got {sorted(pids)}")
    ts = np.array([r.timestamp for r in records], dtype=np.int64)
    if np.any(np.diff(ts) <= 0):
        raise DataError("minute records must be strictly increasing in time (no duplicates)")
    steps = np.array([r.steps for r in records], dtype=np.int64)
    if np.any(steps < 0):
        raise DataError("negative minute step count")
    hr = np.array([np.nan if r.heart_rate is None else r.heart_rate for r in records], dtype=np.float64)

    hour = ts // 60
    h0 = int(hour[0])
    rel = hour - h0
    T = int(rel[-1]) + 1
    tot_steps = np.bincount(rel, weights=steps, minlength=T).astype(np.int64)
    wear = np.bincount(rel, minlength=T)
    has_hr = ~np.isnan(hr)
    hr_sum = np.bincount(rel[has_hr], weights=hr[has_hr], minlength=T)
    hr_n = np.bincount(rel[has_hr], minlength=T)
    with np.errstate(invalid="ignore", divide="ignore"):
        hr_mean = np.where(hr_n > 0, hr_sum / np.maximum(hr_n, 1), np.nan)
    return ParticipantSeries(
        participant_id=records[0].participant_id,
        start_dow=(epoch_dow + h0 // HOURS_PER_DAY) % DAYS_PER_WEEK,
        start_hod=h0 % HOURS_PER_DAY,
        steps=tot_steps,
        wear_minutes=wear,
        heart_rate=hr_mean,
    )


# --------------------------------------------------------------- alignment


def daily_step_profile(series: ParticipantSeries) -> np.ndarray:
    """Mean daily step count per day of week, over days with any wear."""
    obs = series.observed
    day = series.day_index
    n_days = int(day[-1]) + 1
    totals = np.bincount(day, weights=series.steps, minlength=n_days)
    worn = np.bincount(day[obs], minlength=n_days) > 0
    dow_of_day = (series.start_dow + np.arange(n_days)) % DAYS_PER_WEEK
    profile = np.empty(DAYS_PER_WEEK)
    for d in range(DAYS_PER_WEEK):
        sel = worn & (dow_of_day == d)
        if not sel.any():
            raise DataError(f"{series.participant_id}: no observed day for day-of-week {d}")
        profile[d] = totals[sel].mean()
    return profile


def align_day_shift(target: ParticipantSeries | np.ndarray, reference_profile: Sequence[float]) -> int:
    """Cyclic day shift that best matches the target to a reference profile.

    Returns ``s`` in [0, 6] minimising the squared distance between
    ``profile[(d + s) % 7]`` and ``reference_profile[d]``; a target whose
    profile is ``np.roll(reference, s)`` gives back ``s``. Ties go to the
    smallest shift. Pass the result to :func:`apply_day_shift` to relabel.
    """
    profile = target if isinstance(target, np.ndarray) else daily_step_profile(target)
    ref = np.asarray(reference_profile, dtype=np.float64)
    if profile.shape != (7,) or ref.shape != (7,):
        raise ValueError("day profiles must have 7 entries")
    costs = [float(np.sum((np.roll(profile, -s) - ref) ** 2)) for s in range(DAYS_PER_WEEK)]
    return int(np.argmin(costs))


def apply_day_shift(series: ParticipantSeries, shift: int) -> ParticipantSeries:
    return series.replace(start_dow=(series.start_dow - shift) % DAYS_PER_WEEK)


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SynthConfig:
    n_participants: int = 20
    n_weeks: int = 26
    seed: int = 0
    diurnal_amplitude: float = 1.0
    weekend_multiplier: float = 0.75
    ar_coefficient: float = 0.9
    zero_inflation_prob: float = 0.05
    missing_rate: float = 0.3
    overnight_nonwear_prob: float = 0.5
    # spreads of the log-scale random effects
    weekly_sd: float = 0.35
    daily_sd: float = 0.35
    hourly_sd: float = 0.45
    partial_wear_prob: float = 0.1

    def __post_init__(self):
        if self.n_participants < 1 or self.n_weeks < 1:
            raise ValueError("n_participants and n_weeks must be positive")
        if not -1.0 < self.ar_coefficient < 1.0:
            raise ValueError("ar_coefficient must lie in (-1, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        for name in ("zero_inflation_prob", "overnight_nonwear_prob", "partial_wear_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.diurnal_amplitude < 0 or self.weekend_multiplier < 0:
            raise ValueError("diurnal_amplitude and weekend_multiplier must be non-negative")
        for name in ("weekly_sd", "daily_sd", "hourly_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class SyntheticCohort:
    """Observed (masked) series alongside the unmasked ground truth."""

    config: SynthConfig
    observed: list[ParticipantSeries]
    truth: list[ParticipantSeries]
    masked: list[np.ndarray] = field(repr=False)


def _diurnal_curve(amplitude: float, peak_shift: float) -> np.ndarray:
    """Activity multiplier per hour of day: a bump over 5:00-23:00, ~0 overnight."""
    h = np.arange(HOURS_PER_DAY, dtype=np.float64) + 0.5
    phase = np.clip((h - 5.0 - peak_shift) / 18.0, 0.0, 1.0)
    bump = np.sin(np.pi * phase) ** 1.5
    awake = (h > 5.0) & (h < 23.0)
    return np.where(awake, 0.1 + amplitude * bump, 0.0)


def _generate_one(cfg: SynthConfig, pid: str, rng: np.random.Generator):
    n_days = cfg.n_weeks * DAYS_PER_WEEK
    T = n_days * HOURS_PER_DAY
    start_dow = int(rng.integers(DAYS_PER_WEEK))
    dow = (start_dow + np.arange(n_days)) % DAYS_PER_WEEK

    level = math.exp(rng.normal(math.log(12.0), 0.3))
    curve = _diurnal_curve(cfg.diurnal_amplitude, rng.uniform(-1.0, 1.0))
    dow_mult = np.where(np.arange(7) >= 5, cfg.weekend_multiplier, 1.0) * np.exp(rng.normal(0.0, 0.1, 7))

    # weekly AR(1) level, stationary with sd weekly_sd
    phi = cfg.ar_coefficient
    weekly = np.empty(cfg.n_weeks)
    weekly[0] = rng.normal(0.0, cfg.weekly_sd)
    innov = rng.normal(0.0, cfg.weekly_sd * math.sqrt(1.0 - phi * phi), cfg.n_weeks)
    for k in range(1, cfg.n_weeks):
        weekly[k] = phi * weekly[k - 1] + innov[k]
    daily = rng.normal(0.0, cfg.daily_sd, n_days)
    # within-day AR(1) hour-to-hour wiggle
    e = rng.normal(0.0, cfg.hourly_sd * math.sqrt(1.0 - 0.36), T)
    hourly = np.empty(T)
    hourly[0] = rng.normal(0.0, cfg.hourly_sd)
    for t in range(1, T):
        hourly[t] = 0.6 * hourly[t - 1] + e[t]

    day = np.arange(T) // HOURS_PER_DAY
    hod = np.arange(T) % HOURS_PER_DAY
    log_mod = weekly[day // DAYS_PER_WEEK] + daily[day] + hourly
    rate = level * curve[hod] * dow_mult[dow[day]] * np.exp(log_mod)
    rate[rng.random(T) < cfg.zero_inflation_prob] = 0.0

    wear = np.full(T, 60, dtype=np.int64)
    partial = rng.random(T) < cfg.partial_wear_prob
    wear[partial] = rng.integers(1, 60, partial.sum())
    steps = rng.poisson(rate * wear).astype(np.int64)
    hr = np.maximum(40.0, 65.0 + 0.8 * steps / wear + rng.normal(0.0, 5.0, T))
    truth = ParticipantSeries(pid, start_dow, 0, steps, wear, hr)

    masked = np.zeros(T, dtype=bool)
    nights = rng.random(n_days) < cfg.overnight_nonwear_prob
    for d in np.flatnonzero(nights):
        masked[d * 24 + 23 : min(T, d * 24 + 30)] = True
        if d == 0:
            masked[0:6] = True
    eligible = (hod >= 6) & (hod <= 22)
    n_eligible = int(eligible.sum())
    target = cfg.missing_rate * n_eligible
    elig_idx = np.flatnonzero(eligible)
    while (masked & eligible).sum() < target:
        start = int(elig_idx[rng.integers(elig_idx.size)])
        length = int(rng.geometric(1.0 / 3.0))
        masked[start : start + length] = True

    observed = ParticipantSeries(
        pid,
        start_dow,
        0,
        np.where(masked, 0, steps),
        np.where(masked, 0, wear),
        np.where(masked, np.nan, hr),
    )
    return observed, truth, masked


def generate_synthetic_cohort(config: SynthConfig) -> SyntheticCohort:
    """Deterministic synthetic cohort; participant ``i`` uses its own spawned RNG stream."""
    streams = np.random.SeedSequence(config.seed).spawn(config.n_participants)
    width = len(str(config.n_participants - 1))
    obs, truth, masks = [], [], []
    for i, ss in enumerate(streams):
        o, t, m = _generate_one(config, f"P{i:0{width}d}", np.random.default_rng(ss))
        obs.append(o)
        truth.append(t)
        masks.append(m)
    return SyntheticCohort(config, obs, truth, masks)


# ----------------------------------------------------------------------- CSV


def _fmt_hr(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def _hourly_rows(s: ParticipantSeries, extra: np.ndarray | None = None):
    day = s.day_index
    dow = s.day_of_week
    hod = s.hour_of_day
    for i in range(s.T):
        row = [s.participant_id, int(day[i]), int(dow[i]), int(hod[i]), int(s.steps[i]), int(s.wear_minutes[i]), _fmt_hr(s.heart_rate[i])]
        if extra is not None:
            row.append(int(extra[i]))
        yield row


def write_hourly_csv(series: Iterable[ParticipantSeries], path):
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HOURLY_COLUMNS)
        for s in series:
            w.writerows(_hourly_rows(s))


def write_truth_csv(truth: Sequence[ParticipantSeries], masked: Sequence[np.ndarray], path):
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for s, m in zip(truth, masked):
            w.writerows(_hourly_rows(s, m))


def _int(value: str, what: str, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise DataError(f"line {line}: {what} {value!r} is not an integer") from None


def _read_grouped(path, columns: list[str]):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, expected header {','.join(columns)}")
        if [h.strip() for h in header] != columns:
            raise DataError(f"{path}: header {header} does not match {columns}")
        groups: dict[str, list[tuple[int, list[str]]]] = {}
        order: list[str] = []
        last = None
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DataError(f"line {line}: expected {len(columns)} fields, got {len(row)}")
            pid = row[0]
            if pid != last:
                if pid in groups:
                    raise DataError(f"line {line}: rows of participant {pid!r} are not contiguous")
                groups[pid] = []
                order.append(pid)
                last = pid
            groups[pid].append((line, row))
    if not order:
        warnings.warn(f"{path}: no data rows, returning an empty cohort", stacklevel=3)
    return [(pid, groups[pid]) for pid in order]


def _parse_hourly(pid: str, rows) -> tuple[ParticipantSeries, list[list[str]]]:
    n = len(rows)
    steps = np.empty(n, dtype=np.int64)
    wear = np.empty(n, dtype=np.int64)
    hr = np.full(n, np.nan)
    d0 = h0 = w0 = None
    for i, (line, row) in enumerate(rows):
        day = _int(row[1], "day_index", line)
        dow = _int(row[2], "day_of_week", line)
        hod = _int(row[3], "hour_of_day", line)
        st = _int(row[4], "steps", line)
        wm = _int(row[5], "wear_minutes", line)
        if not 0 <= dow < 7 or not 0 <= hod < 24:
            raise DataError(f"line {line}: calendar field out of range")
        if not 0 <= wm <= 60:
            raise DataError(f"line {line}: wear_minutes {wm} outside [0, 60]")
        if st < 0:
            raise DataError(f"line {line}: negative steps")
        if i == 0:
            d0, h0, w0 = day, hod, dow
        if (day - d0) * 24 + hod - h0 != i:
            raise DataError(f"line {line}: hour grid of {pid!r} is not dense")
        if dow != (w0 + day - d0) % 7:
            raise DataError(f"line {line}: day_of_week inconsistent with day_index")
        if row[6].strip():
            try:
                hr[i] = float(row[6])
            except ValueError:
                raise DataError(f"line {line}: heart_rate {row[6]!r} is not a number") from None
            if not hr[i] >= 0:
                raise DataError(f"line {line}: invalid heart rate")
        if wm == 0 and (st != 0 or not np.isnan(hr[i])):
            raise DataError(f"line {line}: zero wear time with steps or heart rate present")
        steps[i], wear[i] = st, wm
    return ParticipantSeries(pid, w0, h0, steps, wear, hr), [r for _, r in rows]


def read_hourly_csv(path) -> list[ParticipantSeries]:
    return [_parse_hourly(pid, rows)[0] for pid, rows in _read_grouped(path, HOURLY_COLUMNS)]


def read_truth_csv(path) -> tuple[list[ParticipantSeries], list[np.ndarray]]:
    series, masks = [], []
    for pid, rows in _read_grouped(path, TRUTH_COLUMNS):
        s, raw = _parse_hourly(pid, rows)
        m = np.empty(s.T, dtype=bool)
        for i, ((line, _), r) in enumerate(zip(rows, raw)):
            v = _int(r[7], "was_masked", line)
            if v not in (0, 1):
                raise DataError(f"line {line}: was_masked must be 0 or 1")
            m[i] = bool(v)
        series.append(s)
        masks.append(m)
    return series, masks


def read_minute_csv(path) -> dict[str, list[MinuteRecord]]:
    out: dict[str, list[MinuteRecord]] = {}
    for pid, rows in _read_grouped(path, MINUTE_COLUMNS):
        recs = []
        for line, row in rows:
            hr = None
            if row[3].strip():
                try:
                    hr = float(row[3])
                except ValueError:
                    raise DataError(f"line {line}: heart_rate {row[3]!r} is not a number") from None
            recs.append(MinuteRecord(pid, _int(row[1], "minute_index", line), _int(row[2], "steps", line), hr))
        out[pid] = recs
    return out


def write_minute_csv(records: Iterable[MinuteRecord], path):
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MINUTE_COLUMNS)
        for r in records:
            w.writerow([r.participant_id, r.timestamp, r.steps, "" if r.heart_rate is None else repr(float(r.heart_rate))])
