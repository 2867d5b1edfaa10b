from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, strategies as st

from cctsim import fuzz, model as m
from cctsim.algos import StrategyConfig
from cctsim.scheduler import (
    Divergence, EmptyEnabledSet, HashMismatch, REASONS, SchedParams, Trace, decision_point,
    derive_seed, execute, program_hash, replay, run_controlled, subset_seed,
)
from helpers import prog, run, single_thread


def test_decision_point_picks_max_weight():
    assert decision_point({0: 0.1, 1: 0.9, 2: 0.5}, [0, 1, 2]) == (1, None)
    assert decision_point({0: 0.1, 1: 0.9}, [0]) == (0, None)


def test_decision_point_ties_lowest_tid():
    assert decision_point({3: 0.5, 1: 0.5, 2: 0.1}, [1, 2, 3])[0] == 1


def test_decision_point_empty_raises():
    with pytest.raises(EmptyEnabledSet):
        decision_point({}, [])


def test_fairness_override():
    tid, why = decision_point({0: 1.0, 1: 0.0}, [0, 1], ages={0: 0, 1: 10}, fairness_bound=5)
    assert (tid, why) == (1, "fairness")
    assert decision_point({0: 1.0, 1: 0.0}, [0, 1], ages={0: 0, 1: 3}, fairness_bound=5) == (0, None)


def test_params_validation():
    with pytest.raises(ValueError):
        SchedParams(sample_rate=1.5)
    with pytest.raises(ValueError):
        SchedParams(slice_events=0)
    with pytest.raises(ValueError):
        SchedParams(rng_seed=-1)


def test_seed_derivation():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert subset_seed(9, 0) == 9 and subset_seed(9, 1) != 9
    assert 0 <= derive_seed("x") < 2**64


def test_single_task_event_sequence():
    trace, outcome = run(single_thread("store x 1", "load x r0", "assert r0 == 1", "exit"))
    assert outcome.kind == "completed"
    assert [e.ev for e in trace.events] == ["store", "load", "assert", "exit"]


def test_determinism_across_strategies(catalog):
    program = catalog["jfs_toy"].program
    for algo in ("rw", "rp", "pos", "pct", "oslike"):
        a = run(program, algo, seed=11)[0].to_jsonl()
        assert a == run(program, algo, seed=11)[0].to_jsonl()


def test_sample_rate_zero_has_no_sampled_points(catalog):
    trace, _ = run(catalog["race1"].program, seed=1, sample_rate=0.0, slice_events=None)
    assert not [d for d in trace.decisions if d.reason == "sampled"]


def test_reasons_are_known(catalog):
    for entry in catalog.values():
        trace, _ = run(entry.program, "pos", seed=5, sample_rate=0.5)
        assert {d.reason for d in trace.decisions} <= set(REASONS)


def test_trace_header_and_round_trip(tmp_path, catalog):
    program = catalog["race1"].program
    trace, _ = run(program, seed=2)
    head = json.loads(trace.to_jsonl().splitlines()[0])
    assert head["type"] == "header"
    assert head["program_hash"] == program_hash(program)
    assert head["seed"] == 2
    path = tmp_path / "t.jsonl"
    trace.write(path)
    again = Trace.read(path)
    assert again.to_jsonl() == trace.to_jsonl()
    assert again.params() == trace.params()


@given(st.integers(0, 5_000))
def test_replay_reproduces_random_runs(seed):
    rng = random.Random(seed)
    program = fuzz.generate_program(rng)
    params = SchedParams(rng_seed=seed, sample_rate=rng.random())
    algo = rng.choice(("rw", "rp", "pos", "pct"))
    trace, outcome = run_controlled(program, StrategyConfig(algo), params)
    got, again = replay(program, trace, return_trace=True)
    assert got.to_jsonl() == trace.to_jsonl()
    assert again.kind == outcome.kind


def test_replay_rejects_other_program(catalog):
    trace, _ = run(catalog["race1"].program)
    with pytest.raises(HashMismatch):
        replay(catalog["race1_locked"].program, trace)


def test_replay_detects_tampered_trace(catalog):
    program = catalog["race1"].program
    trace, _ = run(program, seed=4, sample_rate=1.0)
    lines = trace.to_jsonl().splitlines()
    # corrupt the first event record's object
    for i, line in enumerate(lines):
        rec = json.loads(line)
        if "ev" in rec and rec.get("obj") == "x":
            rec["obj"] = "y"
            lines[i] = json.dumps(rec)
            break
    else:
        pytest.fail("no x access in trace")
    with pytest.raises(Divergence):
        replay(program, Trace.from_jsonl("\n".join(lines)))


def test_livelock_on_step_limit():
    p = prog("object x 0\nthread main:\n label top\n goto top\n")
    _, outcome = run(p, max_steps=500)
    assert outcome.kind == "livelock"


def test_busy_wait_forces_switch():
    # spinner waits on a flag the other task sets; without forced points the
    # spin would run to the step limit
    p = prog("object f 0\nthread main:\n spawn w\n label top\n load f r0\n br r0 == 0 top\n join w\n exit\n"
             "thread w:\n store f 1\n exit")
    for seed in range(20):
        _, outcome = run(p, seed=seed, sample_rate=0.0, slice_events=None, max_steps=100_000)
        assert outcome.kind == "completed"


def test_multi_subset_independent(catalog):
    program = catalog["race1"].program
    single = run_controlled(program, StrategyConfig("rw"), SchedParams(rng_seed=3))
    ex = execute([program, program], StrategyConfig("rw"), SchedParams(rng_seed=3))
    first = [d.tid for d in ex.trace.decisions if d.subset == 0]
    assert first == [d.tid for d in single[0].decisions]
    assert ex.outcome.kind in ("completed", "bug")


def test_check_mode_runs_invariants(catalog):
    for entry in catalog.values():
        execute(entry.program, StrategyConfig("rw"), SchedParams(rng_seed=1), check=True)


def test_outcome_summary_keys(catalog):
    _, outcome = run(catalog["dl1"].program, seed=0, sample_rate=1.0)
    summary = outcome.summary()
    assert summary["outcome"] == outcome.kind
    assert "steps" in summary


def test_program_hash_stable_under_reparse(catalog):
    p = catalog["jfs_toy"].program
    assert program_hash(p) == program_hash(m.parse_program(m.render_program(p)))
