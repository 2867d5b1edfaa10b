"""Evaluation arithmetic: trials-to-bug, Kaplan-Meier curves, log-rank and
chi-square tests, and the CSV formats used to exchange them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from cctsim.algos import StrategyConfig
from cctsim.oracles import check_race
from cctsim.scheduler import COMPLETED, SchedParams, derive_seed, run_controlled

LOW_POWER_N = 5  # groups smaller than this get a low-power flag


@dataclass(frozen=True)
class TrialSample:
    trials: int
    censored: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True)
class SurvivalPoint:
    t: int
    n_at_risk: int
    events: int
    survival: Fraction


@dataclass(frozen=True)
class SurvivalCurve:
    points: tuple

    def at(self, t) -> Fraction:
        """S(t): survival just after time t (step function, S(0) = 1)."""
        s = Fraction(1)
        for p in self.points:
            if p.t > t:
                break
            s = p.survival
        return s

    def median(self) -> int | None:
        """Smallest t with S(t) <= 1/2, None when the curve never gets there."""
        for p in self.points:
            if p.survival <= Fraction(1, 2):
                return p.t
        return None


class TrialError(Exception):
    pass


def trial_seed(meta_seed: int, i: int) -> int:
    return derive_seed(meta_seed, "trial", i)


def trials_to_bug(program, strategy: StrategyConfig, params: SchedParams, max_trials: int,
                  meta_seed: int, races: bool = False) -> TrialSample:
    """Run seeded trials until the first Bug/Deadlock outcome.

    With ``races`` set, a completed trial whose trace contains an unordered
    conflicting pair also counts. A ModelError fault means the program
    itself is malformed, not that a schedule exposed a bug, so it aborts.
    """
    if max_trials < 1:
        raise ValueError("max_trials must be >= 1")
    for i in range(1, max_trials + 1):
        params_i = SchedParams(**{**params.as_dict(), "rng_seed": trial_seed(meta_seed, i)})
        trace, outcome = run_controlled(program, strategy, params_i)
        if outcome.report is not None and outcome.report.kind == "ModelError":
            raise TrialError(f"model error on trial {i}: {outcome.report.detail}")
        if outcome.is_bug or (races and outcome.kind == COMPLETED and check_race(trace, program)):
            return TrialSample(i, False)
    return TrialSample(max_trials, True)


def km_curve(samples) -> SurvivalCurve:
    """Product-limit estimate with right censoring, in exact rationals.

    One point per distinct time that has an event or a censoring.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("km_curve needs at least one sample")
    times = sorted({s.trials for s in samples})
    n = len(samples)
    surv = Fraction(1)
    points = []
    for t in times:
        d = sum(1 for s in samples if s.trials == t and not s.censored)
        c = sum(1 for s in samples if s.trials == t and s.censored)
        if d:
            surv *= 1 - Fraction(d, n)
        points.append(SurvivalPoint(t, n, d, surv))
        n -= d + c
    return SurvivalCurve(tuple(points))


# --------------------------------------------------------------------------
# Chi-square distribution
# --------------------------------------------------------------------------

_EPS = 1e-15
_TINY = 1e-300


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x).

    Series for x < a + 1, Lentz continued fraction otherwise.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    log_pre = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1:
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return max(0.0, 1.0 - total * math.exp(log_pre))
    b = x + 1 - a
    c = 1 / _TINY
    d = 1 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < _EPS:
            break
    return min(1.0, math.exp(log_pre) * h)


def chi2_sf(stat: float, dof: int) -> float:
    return gammaincc(dof / 2, stat / 2)


def chi_square_uniform(counts) -> tuple:
    counts = list(counts)
    if len(counts) < 2 or sum(counts) <= 0:
        raise ValueError("need at least 2 cells and a positive total")
    expected = sum(counts) / len(counts)
    stat = sum((c - expected) ** 2 for c in counts) / expected
    return stat, chi2_sf(stat, len(counts) - 1)


# --------------------------------------------------------------------------
# Log-rank
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LogRank:
    statistic: float
    p_value: float
    low_power: bool

    def __iter__(self):
        return iter((self.statistic, self.p_value))


def logrank(a, b) -> LogRank:
    """Two-group log-rank test (1 degree of freedom).

    Unpacks as ``(statistic, p_value)``; ``low_power`` marks groups too
    small for the chi-square approximation.
    """
    a, b = list(a), list(b)
    if not a or not b:
        raise ValueError("both groups must be non-empty")
    times = sorted({s.trials for s in a + b if not s.censored})
    obs_minus_exp = 0.0
    var = 0.0
    for t in times:
        n1 = sum(1 for s in a if s.trials >= t)
        n2 = sum(1 for s in b if s.trials >= t)
        d1 = sum(1 for s in a if s.trials == t and not s.censored)
        d2 = sum(1 for s in b if s.trials == t and not s.censored)
        n, d = n1 + n2, d1 + d2
        obs_minus_exp += d1 - d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    stat = obs_minus_exp * obs_minus_exp / var if var > 0 else 0.0
    p = chi2_sf(stat, 1) if stat > 0 else 1.0
    return LogRank(stat, p, is_low_power(a, b))


def is_low_power(a, b) -> bool:
    return min(len(a), len(b)) < LOW_POWER_N


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

SAMPLE_COLUMNS = ("trials", "censored")
KM_COLUMNS = ("t", "n_at_risk", "events", "survival")


def write_samples(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow((s.trials, int(s.censored)))


def read_samples(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "trials" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a 'trials' column")
        out = []
        for row in reader:
            censored = str(row.get("censored", "0")).strip().lower() in ("1", "true", "yes")
            out.append(TrialSample(int(row["trials"]), censored))
        return out


def _fmt(x: Fraction) -> str:
    return repr(float(x)) if x.denominator != 1 else str(x.numerator)


def write_km(path, curve: SurvivalCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KM_COLUMNS)
        for p in curve.points:
            w.writerow((p.t, p.n_at_risk, p.events, _fmt(p.survival)))


def read_counts(path) -> list:
    """Counts from a one-column CSV (header optional)."""
    values = []
    for row in csv.reader(Path(path).read_text().splitlines()):
        if not row or not row[0].strip():
            continue
        try:
            values.append(int(row[-1]))
        except ValueError:
            if values:
                raise
    return values
