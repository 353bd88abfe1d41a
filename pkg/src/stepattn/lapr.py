"""Local activity profile representation (LAPR).

The LAPR of block ``u`` is the z-normalized step rate over ``u-72 .. u+72``.
Positions that are missing, out of range, hidden (held out), or equal to ``u``
itself are replaced by the participant's DW+HD median rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .baselines.fills import dw_hd_median_table
from .core import NormStats, ParticipantSeries, as_index_mask

HALF_WIDTH = 72
LENGTH = 2 * HALF_WIDTH + 1
CENTER = HALF_WIDTH


@dataclass(frozen=True)
class LAPR:
    values: np.ndarray
    fill_mask: np.ndarray


class LaprContext:
    """Everything needed to cut LAPRs out of one participant's series.

    ``hidden`` marks blocks whose values must not be seen (held-out blocks and
    prediction targets); they are treated exactly like missing blocks.
    """

    def __init__(self, series: ParticipantSeries, stats: NormStats, hidden=None):
        self.series = series
        self.stats = stats
        T = series.T
        self.hidden = as_index_mask(hidden, T)
        self.visible = series.observed & ~self.hidden
        rates = np.where(self.visible, series.steps / np.maximum(series.wear_minutes, 1), 0.0)
        self.rate_z = np.where(self.visible, stats.normalize_rate(rates), 0.0)
        hr = series.heart_rate
        hr_ok = self.visible & ~np.isnan(hr)
        self.hr_z = np.where(hr_ok, stats.normalize_hr(np.where(hr_ok, hr, 0.0)), 0.0)
        self.median_table = dw_hd_median_table(series, self.hidden, hours=None)
        self.fill_table_z = stats.normalize_rate(self.median_table)

        ext_index = np.arange(-HALF_WIDTH, T + HALF_WIDTH)
        dow, hod = series.calendar(ext_index)
        fill_ext = self.fill_table_z[dow, hod]
        self.fill_z = fill_ext[HALF_WIDTH : HALF_WIDTH + T]
        vis_ext = np.zeros(ext_index.size, dtype=bool)
        vis_ext[HALF_WIDTH : HALF_WIDTH + T] = self.visible
        self.base_ext = np.where(vis_ext, np.pad(self.rate_z, HALF_WIDTH), fill_ext)
        self.filled_ext = ~vis_ext
        self.base_ext.setflags(write=False)

    @property
    def T(self) -> int:
        return self.series.T

    def rows(self, centers) -> np.ndarray:
        """LAPR vectors for the given block indices, shape (n, 145)."""
        centers = np.asarray(centers, dtype=np.int64)
        out = sliding_window_view(self.base_ext, LENGTH)[centers].copy()
        out[:, CENTER] = self.fill_z[centers]
        return out

    def fill_masks(self, centers) -> np.ndarray:
        centers = np.asarray(centers, dtype=np.int64)
        out = sliding_window_view(self.filled_ext, LENGTH)[centers].copy()
        out[:, CENTER] = True
        return out


def build_lapr(series: ParticipantSeries, t: int, holdout, stats: NormStats) -> LAPR:
    """LAPR of target ``t`` with ``t`` and every held-out block treated as missing."""
    if not 0 <= t < series.T:
        raise IndexError(f"t={t} outside the series")
    hidden = as_index_mask(holdout, series.T)
    hidden[t] = True
    ctx = LaprContext(series, stats, hidden)
    return LAPR(ctx.rows([t])[0], ctx.fill_masks([t])[0].astype(np.int8))
