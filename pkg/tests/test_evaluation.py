import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepattn.evaluation import (
    MISSING_RATE_LABELS,
    _allocate,
    acf,
    build_report,
    ci95,
    eligible_blocks,
    metrics,
    missing_rate,
    missing_rate_bin,
    paired_ttest,
    participant_acf,
    read_split_csv,
    step_count_bin,
    step_count_bin_breakdown,
    stratified_split,
    write_split_csv,
)

from conftest import make_series
from oracles import metrics_oracle

err_lists = st.lists(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=30), min_size=1, max_size=8)


@given(err_lists)
@settings(max_examples=100, deadline=None)
def test_metrics_match_oracle(errors):
    m = metrics(errors)
    o = metrics_oracle(errors)
    for k, v in o.items():
        assert getattr(m, k) == pytest.approx(v, rel=1e-9, abs=1e-9)
    assert m.n_blocks == sum(map(len, errors))
    assert m.micro_rmse >= m.micro_mae - 1e-9 and m.macro_rmse >= m.macro_mae - 1e-9


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=50))
@settings(max_examples=50, deadline=None)
def test_single_participant_macro_equals_micro(e):
    m = metrics([e])
    assert m.macro_mae == pytest.approx(m.micro_mae, rel=1e-12, abs=1e-12)
    assert m.macro_rmse == pytest.approx(m.micro_rmse, rel=1e-12, abs=1e-12)


def test_metrics_hand_values():
    m = metrics([[1, -1], [4]])
    assert m.macro_mae == 2.5 and m.micro_mae == 2.0
    assert m.micro_rmse == pytest.approx(math.sqrt(6))
    assert metrics([[], [3]]).n_participants == 1
    with pytest.raises(ValueError):
        metrics([[]])


def test_ci95_and_ttest():
    v = [1.0, 2.0, 3.0, 4.0]
    assert ci95(v) == pytest.approx(1.96 * np.std(v, ddof=1) / 2)
    assert math.isnan(ci95([1.0]))
    t, p = paired_ttest([1, 2, 3, 4.5], [0, 1, 2.5, 3])
    assert t > 0 and 0 < p < 0.05


@given(st.integers(0, 500), st.lists(st.floats(0.01, 1), min_size=2, max_size=5))
def test_allocate_within_one(n, w):
    p = np.array(w) / sum(w)
    c = _allocate(n, p)
    assert c.sum() == n
    assert np.all(np.abs(c - n * p) < 1 + 1e-9)


def test_split_properties(small_cohort):
    cohort = small_cohort.observed
    a = stratified_split(cohort, n_folds=2, seed=3)
    b = stratified_split(cohort, n_folds=2, seed=3)
    for s in cohort:
        pid = s.participant_id
        elig = eligible_blocks(s)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.assignment[pid], fb.assignment[pid])
            asg = fa.assignment[pid]
            # disjoint and exhaustive over eligible blocks, nothing else assigned
            assert np.array_equal(asg >= 0, elig)
            parts = [set(fa.indices(pid, p)) for p in ("train", "validation", "test")]
            assert sum(map(len, parts)) == elig.sum() and not (parts[0] & parts[1] or parts[1] & parts[2] or parts[0] & parts[2])
            assert np.array_equal(fa.holdout(pid), asg >= 1)
            for k in range(10):
                sel = fa.strata[pid] == k
                n = sel.sum()
                for part, p in zip((0, 1, 2), (0.8, 0.15, 0.05)):
                    assert abs((asg[sel] == part).sum() - n * p) <= 1
            # strata are contiguous in step count
            lo = [s.steps[fa.strata[pid] == k] for k in range(10)]
            assert all(lo[k].max() <= lo[k + 1].min() for k in range(9))
        assert not np.array_equal(a[0].assignment[pid], a[1].assignment[pid])


def test_split_csv_roundtrip(small_cohort, small_split, tmp_path):
    write_split_csv(small_split, tmp_path / "s.csv")
    back = read_split_csv(tmp_path / "s.csv", small_cohort.observed)
    for pid, a in small_split.assignment.items():
        assert np.array_equal(back.assignment[pid], a)
        assert np.array_equal(back.strata[pid], small_split.strata[pid])


def test_missing_rate_and_bins():
    s = make_series([5] * 48, wear=[0] * 10 + [60] * 38)
    # daytime hours 6..22 on two days: hours 6..9 missing on day 0
    assert missing_rate(s) == pytest.approx(4 / 34)
    assert [missing_rate_bin(r) for r in (0.0, 0.1999, 0.2, 0.5, 0.8, 0.99, 1.0)] == [0, 0, 1, 2, 4, 4, 4]
    with pytest.raises(ValueError):
        missing_rate_bin(1.01)
    assert len(MISSING_RATE_LABELS) == 5


def test_step_bins():
    assert step_count_bin([0, 1, 500, 501, 1000, 1001]).tolist() == [0, 1, 1, 2, 2, 3]
    out = step_count_bin_breakdown({"a": [0, 10, 600], "b": [0, 20, 500]}, [0, 0, 500], reference="a")
    assert out["a"][0] == {"micro_mae": 5.0, "n": 2, "ratio": 1.0}
    assert out["b"][0]["ratio"] == 2.0
    assert out["b"][1]["ratio"] == 0.0


def _acf_oracle(x, k):
    pairs = [(x[i], x[i + k]) for i in range(len(x) - k) if not (np.isnan(x[i]) or np.isnan(x[i + k]))]
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    return float(np.corrcoef(a, b)[0, 1])


def test_acf_matches_oracle():
    rng = np.random.default_rng(0)
    T = 400
    wear = np.where(rng.random(T) < 0.2, 0, 60)
    steps = (1000 * (1 + np.sin(2 * np.pi * np.arange(T) / 24)) + rng.normal(0, 100, T)).astype(int)
    s = make_series(steps, wear=wear)
    r = participant_acf(s, max_lag=48)
    x = s.step_rates()
    for k in (1, 5, 12, 24, 48):
        assert r[k - 1] == pytest.approx(_acf_oracle(x, k), abs=1e-12)
    assert r[23] > 0.8 and r[11] < -0.8
    m = acf([s, s], max_lag=48)
    np.testing.assert_array_equal(m, r)
    assert np.isnan(participant_acf(make_series([1] * 40), max_lag=5)).all()


def test_report_writers(tmp_path):
    truths = [np.array([0.0, 600.0]), np.array([100.0])]
    preds = {"median:dw_hd": [np.array([10.0, 500.0]), np.array([100.0])], "attention": [np.array([0.0, 600.0]), np.array([90.0])]}
    rep = build_report(truths, preds, [0.1, 0.9], reference="median:dw_hd")
    assert rep.n_blocks == 3
    att = rep.methods["attention"]
    assert att.overall.micro_mae == pytest.approx(10 / 3)
    assert att.by_missing_bin["[0,20)"][0] == 0.0 and att.by_missing_bin["[80,100)"][0] == 10.0
    rep.write_table_csv(tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert [r["method"] for r in rows] == ["median:dw_hd", "attention"]
    assert float(rows[1]["overall_macro_mae"]) == pytest.approx(5.0)
    assert rows[1]["[20,40)_macro_mae"] == ""
    rep.write_step_bins_csv(tmp_path / "b.csv")
    b = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert {(r["method"], r["bin"]) for r in b} >= {("attention", "0"), ("attention", "2")}
    rep.write_jsonl(tmp_path / "r.jsonl")
    recs = [json.loads(l) for l in open(tmp_path / "r.jsonl")]
    assert recs[1]["method"] == "attention" and recs[1]["overall"]["n_blocks"] == 3
