import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stepattn.window import (
    CENTER,
    DAY_OFFSETS,
    HOUR_OFFSETS,
    MAX_REACH,
    N_CELLS,
    OUT_OF_RANGE,
    build_window,
    cell_of_index,
    make_offsets,
    mask,
    mask_grid,
    relative_index,
    window_indices,
)

from conftest import make_series

DAYS = [-35, -28, -21, -14, -7, -6, -5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 6, 7, 14, 21, 28, 35]


def _oracle_cells(t, T):
    out = {}
    for r, h in enumerate(range(-4, 5)):
        for c, d in enumerate(DAYS):
            u = t + 24 * d + h
            out[(r, c)] = u if 0 <= u < T else None
    return out


def test_geometry_constants():
    assert list(HOUR_OFFSETS) == list(range(-4, 5))
    assert list(DAY_OFFSETS) == DAYS
    assert N_CELLS == 206
    assert CENTER == (4, 11)
    h, d = make_offsets()
    assert np.array_equal(h, HOUR_OFFSETS) and np.array_equal(d, DAY_OFFSETS)
    assert MAX_REACH == 35 * 24 + 4


@given(st.integers(0, 3000), st.integers(1, 3000))
def test_window_matches_oracle(t, T):
    if t >= T:
        with pytest.raises(IndexError):
            build_window(t, T)
        return
    w = build_window(t, T)
    oracle = _oracle_cells(t, T)
    for (r, c), u in oracle.items():
        assert w.cell(r, c) == (OUT_OF_RANGE if u is None else u)
    expect = [u for (rc, u) in sorted(oracle.items(), key=lambda kv: kv[0][0] * 23 + kv[0][1]) if rc != CENTER and u is not None]
    assert list(w.attention_set) == expect
    idx, valid = window_indices(np.array([t]), T)
    assert list(idx[0][valid[0]]) == expect


def test_interior_set_size():
    T = 5000
    for t in range(MAX_REACH, T - MAX_REACH, 97):
        assert build_window(t, T).attention_set.size == 206


def test_relative_index_bijection():
    seen = set()
    for r in range(9):
        for c in range(23):
            if (r, c) == CENTER:
                with pytest.raises(ValueError):
                    relative_index((r, c))
                continue
            k = relative_index((r, c))
            assert cell_of_index(k) == (r, c)
            seen.add(k)
    assert seen == set(range(206))


def test_mask_follows_wear():
    wear = np.full(2000, 60)
    wear[1000 + 24] = 0
    s = make_series(np.full(2000, 10), wear=wear)
    w = build_window(1000, 2000)
    g = mask_grid(w, s)
    assert g[CENTER] == 0
    assert mask(w, (4, 12), s) == 0  # one day later, same hour: not worn
    assert mask(w, (4, 10), s) == 1
    assert g.sum() == 205
    edge = build_window(0, 2000)
    assert mask(edge, (0, 0), s) == 0
