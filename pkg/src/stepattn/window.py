"""Multi-timescale sparse attention window.

Rows of the grid are hour offsets (-4..4), columns are day offsets
(-35, -28, -21, -14, -7..7, 14, 21, 28, 35). The centre cell is the query
block itself and never part of the attention set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ParticipantSeries

HOUR_OFFSETS = np.arange(-4, 5)
DAY_OFFSETS = np.array([-35, -28, -21, -14] + list(range(-7, 8)) + [14, 21, 28, 35])
N_ROWS = HOUR_OFFSETS.size
N_COLS = DAY_OFFSETS.size
CENTER = (4, 11)
N_CELLS = N_ROWS * N_COLS - 1  # 206
OUT_OF_RANGE = -1

_CENTER_FLAT = CENTER[0] * N_COLS + CENTER[1]
# hour offsets of every grid cell, row-major, shape (9, 23)
GRID_OFFSETS = HOUR_OFFSETS[:, None] + 24 * DAY_OFFSETS[None, :]
# the 206 non-centre offsets, ordered by relative_index
CELL_OFFSETS = np.delete(GRID_OFFSETS.ravel(), _CENTER_FLAT)
CELL_ROWS, CELL_COLS = np.divmod(np.delete(np.arange(N_ROWS * N_COLS), _CENTER_FLAT), N_COLS)
MAX_REACH = int(np.abs(GRID_OFFSETS).max())  # 844 hours


def make_offsets(hours_each_side: int = 4, weeks_each_side: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Hour and day offsets for a window of the given half-widths.

    The default reproduces the fixed 9 x 23 grid. The first week on each side
    is always complete; further weeks contribute one day each.
    """
    if hours_each_side < 0 or weeks_each_side < 1:
        raise ValueError("need hours_each_side >= 0 and weeks_each_side >= 1")
    hours = np.arange(-hours_each_side, hours_each_side + 1)
    far = [7 * k for k in range(2, weeks_each_side + 1)]
    days = np.array([-d for d in reversed(far)] + list(range(-7, 8)) + far)
    return hours, days


@dataclass(frozen=True)
class ContextWindowIndex:
    t: int
    T: int
    cells: np.ndarray  # (9, 23) absolute hour index or OUT_OF_RANGE; centre holds t

    day_offsets = DAY_OFFSETS
    hour_offsets = HOUR_OFFSETS
    center_cell = CENTER

    def in_range(self) -> np.ndarray:
        """Bool (9, 23): cell lands inside the series and is not the centre."""
        ok = self.cells != OUT_OF_RANGE
        ok[CENTER] = False
        return ok

    @property
    def attention_set(self) -> np.ndarray:
        """Absolute indices of the candidate context blocks, in relative_index order."""
        flat = np.delete(self.cells.ravel(), _CENTER_FLAT)
        return flat[flat != OUT_OF_RANGE]

    def cell(self, row: int, col: int) -> int:
        return int(self.cells[row, col])


def build_window(t: int, T: int) -> ContextWindowIndex:
    if not 0 <= t < T:
        raise IndexError(f"t={t} outside [0, {T})")
    cells = t + GRID_OFFSETS
    cells = np.where((cells >= 0) & (cells < T), cells, OUT_OF_RANGE)
    cells.setflags(write=False)
    return ContextWindowIndex(int(t), int(T), cells)


def mask(window: ContextWindowIndex, cell: tuple[int, int], series: ParticipantSeries) -> int:
    row, col = cell
    if (row, col) == CENTER:
        return 0
    idx = window.cells[row, col]
    if idx == OUT_OF_RANGE:
        return 0
    return int(series.wear_minutes[idx] > 0)


def mask_grid(window: ContextWindowIndex, series: ParticipantSeries) -> np.ndarray:
    """Vectorised ``mask`` over the whole (9, 23) grid."""
    ok = window.in_range()
    idx = np.where(ok, window.cells, 0)
    return (ok & (series.wear_minutes[idx] > 0)).astype(np.int8)


def relative_index(cell: tuple[int, int]) -> int:
    row, col = cell
    if not (0 <= row < N_ROWS and 0 <= col < N_COLS):
        raise IndexError(f"cell {cell} outside the 9 x 23 grid")
    if (row, col) == CENTER:
        raise ValueError("the centre cell has no relative index")
    flat = row * N_COLS + col
    return flat - 1 if flat > _CENTER_FLAT else flat


def cell_of_index(index: int) -> tuple[int, int]:
    if not 0 <= index < N_CELLS:
        raise IndexError(index)
    return int(CELL_ROWS[index]), int(CELL_COLS[index])


def window_indices(targets: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Context block indices for many targets at once.

    Returns ``(idx, valid)`` of shape (n, 206) in relative_index order; ``idx``
    is clamped to 0 where ``valid`` is False.
    """
    targets = np.asarray(targets, dtype=np.int64)
    idx = targets[:, None] + CELL_OFFSETS[None, :]
    valid = (idx >= 0) & (idx < T)
    return np.where(valid, idx, 0), valid
