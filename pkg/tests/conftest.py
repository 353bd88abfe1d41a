import numpy as np
import pytest

from stepattn.core import ParticipantSeries
from stepattn.evaluation import stratified_split
from stepattn.ingest import SynthConfig, generate_synthetic_cohort


def make_series(steps, wear=None, hr=None, pid="X", start_dow=0, start_hod=0):
    steps = np.asarray(steps, dtype=np.int64)
    if wear is None:
        wear = np.where(steps >= 0, 60, 0)
    wear = np.asarray(wear, dtype=np.int64)
    steps = np.where(wear > 0, np.maximum(steps, 0), 0)
    if hr is None:
        hr = np.where(wear > 0, 70.0, np.nan)
    return ParticipantSeries(pid, start_dow, start_hod, steps, wear, hr)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(SynthConfig(n_participants=3, n_weeks=8, seed=11))


@pytest.fixture(scope="session")
def small_split(small_cohort):
    return stratified_split(small_cohort.observed, n_folds=1, seed=5)[0]
