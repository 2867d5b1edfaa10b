"""Hand-written statistics checked against scipy and statsmodels."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats as sps
from statsmodels.duration.survfunc import SurvfuncRight, survdiff

from cctsim import stats
from cctsim.algos import StrategyConfig
from cctsim.scheduler import SchedParams
from helpers import prog

S = stats.TrialSample

samples_st = st.lists(st.tuples(st.integers(1, 30), st.booleans()), min_size=1, max_size=40)


def test_sample_validation():
    with pytest.raises(ValueError):
        S(0)


@given(samples_st)
def test_km_matches_statsmodels(raw):
    samples = [S(t, c) for t, c in raw]
    curve = stats.km_curve(samples)
    ref = SurvfuncRight(np.array([t for t, _ in raw], float), np.array([not c for _, c in raw], float))
    for t, s in zip(ref.surv_times, ref.surv_prob):
        assert float(curve.at(int(t))) == pytest.approx(s, abs=1e-12)


@given(samples_st)
def test_km_monotone_and_bounded(raw):
    curve = stats.km_curve([S(t, c) for t, c in raw])
    prev = Fraction(1)
    for p in curve.points:
        assert 0 <= p.survival <= prev
        prev = p.survival


def test_km_all_censored_never_drops():
    curve = stats.km_curve([S(5, True), S(5, True)])
    assert curve.at(100) == 1 and curve.median() is None


@pytest.mark.parametrize("a", [0.5, 1, 2.5, 7, 30])
@pytest.mark.parametrize("x", [0.01, 0.7, 3, 12, 80])
def test_gammaincc_matches_scipy(a, x):
    assert stats.gammaincc(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-10, abs=1e-14)


def test_chi_square_uniform_matches_scipy():
    counts = [10017, 10117, 9866]
    stat, p = stats.chi_square_uniform(counts)
    ref = sps.chisquare(counts)
    assert stat == pytest.approx(ref.statistic)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_chi_square_rejects_bad_input():
    with pytest.raises(ValueError):
        stats.chi_square_uniform([5])
    with pytest.raises(ValueError):
        stats.chi_square_uniform([0, 0])


@given(samples_st, samples_st)
def test_logrank_matches_statsmodels(ra, rb):
    a = [S(t, c) for t, c in ra]
    b = [S(t, c) for t, c in rb]
    if all(s.censored for s in a + b):
        return
    stat, p = stats.logrank(a, b)
    time = np.array([t for t, _ in ra + rb], float)
    status = np.array([not c for _, c in ra + rb], float)
    group = np.array([0] * len(ra) + [1] * len(rb))
    try:
        ref_stat, ref_p = survdiff(time, status, group)
    except np.linalg.LinAlgError:
        # zero variance: no information to compare groups
        assert (stat, p) == (0.0, 1.0)
        return
    assert stat == pytest.approx(ref_stat, rel=1e-9, abs=1e-12)
    assert p == pytest.approx(ref_p, rel=1e-9, abs=1e-12)


def test_logrank_known_values():
    a = [S(2), S(3), S(3), S(5)]
    b = [S(2), S(3), S(4, True)]
    res = stats.logrank(a, b)
    assert res.statistic == pytest.approx(0.0042507970, abs=1e-9)
    assert res.p_value == pytest.approx(0.9480162447, abs=1e-9)
    assert res.low_power


def test_trials_to_bug_counts_and_censors():
    always = prog("object x 0\nthread main:\n assert 0\n")
    never = prog("object x 0\nthread main:\n store x 1\n exit")
    assert stats.trials_to_bug(always, StrategyConfig(), SchedParams(), 10, 0) == S(1)
    assert stats.trials_to_bug(never, StrategyConfig(), SchedParams(), 10, 0) == S(10, True)


def test_trials_to_bug_raises_on_model_error():
    bad = prog("lock M mutex\nthread main:\n release M\n")
    with pytest.raises(stats.TrialError):
        stats.trials_to_bug(bad, StrategyConfig(), SchedParams(), 5, 0)


def test_csv_round_trip(tmp_path):
    samples = [S(3), S(7, True), S(1)]
    path = tmp_path / "trials_x.csv"
    stats.write_samples(path, samples)
    assert stats.read_samples(path) == samples
    km = tmp_path / "km.csv"
    stats.write_km(km, stats.km_curve(samples))
    assert km.read_text().splitlines()[0] == "t,n_at_risk,events,survival"


def test_read_counts(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("count\n4\n5\n6\n")
    assert stats.read_counts(path) == [4, 5, 6]


def test_race_trials_opt_in(catalog):
    program = catalog["race1"].program
    assert stats.trials_to_bug(program, StrategyConfig(), SchedParams(), 5, 0).censored
    assert stats.trials_to_bug(program, StrategyConfig(), SchedParams(), 5, 0, races=True) == S(1)


def test_asserted_race_median(catalog):
    program = catalog["race1_assert"].program
    trials = sorted(stats.trials_to_bug(program, StrategyConfig(), SchedParams(), 50, ms).trials
                    for ms in range(100))
    assert (trials[49] + trials[50]) / 2 <= 3
