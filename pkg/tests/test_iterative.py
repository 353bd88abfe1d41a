import numpy as np
import pytest

from stepattn.baselines.iterative import (
    CENTER_POS,
    N_POS,
    IterativeImputer,
    chain,
    clamp_bounds,
    imputation_order,
    iterative_fit,
    iterative_infer_many,
    iterative_predict_deterministic,
    iterative_samples,
    window_matrix,
)
from stepattn.core import ParticipantSeries, compute_norm_stats
from stepattn.evaluation import stratified_split


def test_order_small_grid_centre_last():
    assert imputation_order(9).tolist() == [0, 8, 1, 7, 2, 6, 3, 5, 4]
    o = imputation_order()
    assert sorted(o.tolist()) == list(range(N_POS)) and o[-1] == CENTER_POS == 103


def _random_imputer(seed, sigma=0.0):
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 0.02, (N_POS, N_POS - 1 + 31))
    return IterativeImputer(w, rng.normal(0, 0.1, N_POS), np.full(N_POS, sigma), imputation_order())


def test_imputer_validation():
    imp = _random_imputer(0)
    with pytest.raises(ValueError):
        IterativeImputer(imp.weights, imp.bias, -np.ones(N_POS), imp.order)
    with pytest.raises(ValueError):
        IterativeImputer(imp.weights, imp.bias, imp.sigma2, np.arange(N_POS))


@pytest.fixture(scope="module")
def fitted(small_cohort, small_split):
    return iterative_fit(small_cohort.observed, small_split)


def _setup(cohort, split):
    s = cohort.observed[1]
    hold = split.holdout(s.participant_id)
    return s, hold, compute_norm_stats(s, exclude=hold), split.indices(s.participant_id, "test")


def test_zero_noise_equals_deterministic(fitted, small_cohort, small_split):
    s, hold, stats, tg = _setup(small_cohort, small_split)
    imp = IterativeImputer(fitted.weights, fitted.bias, np.zeros(N_POS), fitted.order)
    a = iterative_infer_many(imp, s, tg, hold, stats, seed=3)
    b = iterative_predict_deterministic(imp, s, tg, hold, stats)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_mean_equals_replayed_samples(fitted, small_cohort, small_split):
    s, hold, stats, tg = _setup(small_cohort, small_split)
    assert np.all(fitted.sigma2 > 0)
    out = iterative_infer_many(fitted, s, tg, hold, stats, seed=9)
    samples = iterative_samples(fitted, s, tg, hold, stats, seed=9)
    replay = np.zeros(tg.size)
    for k in range(5):
        replay += samples[k]
    assert np.array_equal(out, np.mean(samples, axis=0))
    np.testing.assert_allclose(out, replay / 5, rtol=1e-14)
    assert np.array_equal(out, iterative_infer_many(fitted, s, tg, hold, stats, seed=9))
    assert not np.array_equal(out, iterative_infer_many(fitted, s, tg, hold, stats, seed=10))


def test_samples_obey_clamp(small_cohort, small_split):
    s, hold, stats, tg = _setup(small_cohort, small_split)
    imp = _random_imputer(1, sigma=25.0)
    lo, hi = clamp_bounds(stats)
    hidden = hold.copy()
    hidden[tg] = True
    vals, obs, cal = window_matrix(s, tg, stats, hidden)
    x = chain(imp, vals, obs, cal, lo, hi, np.random.default_rng(0))
    assert np.all(x[~obs] >= lo - 1e-12) and np.all(x[~obs] <= hi + 1e-12)
    assert np.array_equal(x[obs], vals[obs])
    counts = iterative_samples(imp, s, tg, hold, stats)
    assert np.all(counts >= 0) and np.all(counts <= s.wear_minutes[tg] * 1.5 * stats.max_train_step_rate + 1e-9)


def test_constant_data_gives_zero_residuals():
    T = 24 * 7 * 8
    cohort = [ParticipantSeries(f"C{i}", i, 0, np.full(T, 600), np.full(T, 60), np.full(T, 75.0)) for i in range(2)]
    split = stratified_split(cohort, n_folds=1)[0]
    imp = iterative_fit(cohort, split)
    assert np.all(imp.sigma2 < 1e-4)
    s = cohort[0]
    hold = split.holdout("C0")
    stats = compute_norm_stats(s, exclude=hold)
    tg = split.indices("C0", "test")
    np.testing.assert_allclose(iterative_infer_many(imp, s, tg, hold, stats), 600.0, atol=1.0)


def test_save_load(tmp_path, fitted):
    fitted.save(tmp_path / "it.npz")
    back = IterativeImputer.load(tmp_path / "it.npz")
    assert np.array_equal(back.weights, fitted.weights) and np.array_equal(back.sigma2, fitted.sigma2)
