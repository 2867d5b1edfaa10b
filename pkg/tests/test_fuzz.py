from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from cctsim import fuzz, model as m
from cctsim.model import Call, CallSequence

SPEC = m.parse_target_spec("object x 0\nproc a(v: 0..3):\n  store x $v\nproc b():\n  load x r0\n")


@given(st.integers(0, 10**6))
def test_generated_sequences_respect_spec(seed):
    rng = random.Random(seed)
    seq = fuzz.generate_seq(SPEC, rng, 5)
    assert 1 <= len(seq) <= 5
    m.instantiate_input(SPEC, seq)  # raises on any range violation
    for _ in range(10):
        seq = fuzz.mutate_seq(seq, SPEC, rng)
        m.instantiate_input(SPEC, seq)


def test_insert_remove():
    seq = CallSequence((Call("a", (1,)),))
    seq = fuzz.insert_call(seq, 0, Call("b"))
    assert [c.proc for c in seq] == ["b", "a"]
    assert [c.proc for c in fuzz.remove_call(seq, 0)] == ["a"]


def test_mutate_arg_stays_in_range():
    rng = random.Random(0)
    seq = CallSequence((Call("a", (1,)),))
    for _ in range(50):
        seq = fuzz.mutate_arg(SPEC, seq, 0, 0, rng)
        assert 0 <= seq.calls[0].args[0] <= 3


def test_mutate_falls_back_when_infeasible():
    seq = CallSequence((Call("b"),))
    out = fuzz.mutate_seq(seq, SPEC, random.Random(1), op="mutate_arg")
    m.instantiate_input(SPEC, out)


@given(st.lists(st.sampled_from("abc"), max_size=10), st.integers(1, 6), st.integers(0, 10**6))
def test_concurrency_mutate_structure(procs, n, seed):
    p = CallSequence(tuple(Call(x) for x in procs))
    out = fuzz.concurrency_mutate(p, n, random.Random(seed))
    sync = tuple(c for c in out if not c.is_async)
    asyncs = [c for c in out if c.is_async]
    assert sync == p.calls
    if p.calls:
        assert 1 <= len(asyncs) <= min(n, len(p))
    else:
        assert not out.calls
    assert all(c.is_async or c in p.calls for c in out)


def test_synchronous_strips_flags():
    seq = CallSequence((Call("a", (1,), True), Call("b")))
    assert all(not c.is_async for c in fuzz.synchronous(seq))


def test_is_interesting():
    assert fuzz.is_interesting({1, 2}, {1})
    assert not fuzz.is_interesting({1}, {1, 2})


def test_corpus_only_keeps_new_coverage():
    c = fuzz.Corpus()
    seq = CallSequence((Call("b"),))
    assert c.add_if_new(seq, {1, 2}, 1) == 2
    assert c.add_if_new(seq, {2}, 1) == 0
    assert len(c) == 1
    assert c.draw(random.Random(0)).seq == seq


def test_config_validation():
    with pytest.raises(ValueError):
        fuzz.CampaignConfig(SPEC, par_calls=0)
    with pytest.raises(ValueError):
        fuzz.CampaignConfig(SPEC, workers=0)


def test_campaign_finds_jfs_bug(tmp_path, catalog):
    cfg = fuzz.CampaignConfig(catalog["jfs_toy"].spec, 30, 200, out_dir=tmp_path)
    report = fuzz.fuzz_campaign(cfg)
    assert report.executions == 230
    assert report.bugs and {b.report.kind for b in report.bugs} == {"NullDeref"}
    assert (tmp_path / "report.jsonl").exists()
    assert len(list((tmp_path / "bugs").glob("*.trace.jsonl"))) == len(report.bugs)
    # saved corpus reloads to the same sequences
    again = fuzz.load_corpus(tmp_path / "corpus", cfg.spec)
    assert [s.seq for s in again] == [s.seq for s in report.corpus.seeds()]
    # coverage curve never shrinks
    sizes = [c for _, c in report.coverage_curve]
    assert sizes == sorted(sizes)


def test_campaign_deterministic_single_worker(catalog):
    spec = catalog["jfs_toy"].spec
    a = fuzz.fuzz_campaign(fuzz.CampaignConfig(spec, 20, 40, seed=5))
    b = fuzz.fuzz_campaign(fuzz.CampaignConfig(spec, 20, 40, seed=5))
    assert [b_.seq for b_ in a.bugs] == [b_.seq for b_ in b.bugs]
    assert a.corpus.coverage() == b.corpus.coverage()


def test_campaign_parallel_workers(catalog):
    spec = catalog["jfs_toy"].spec
    report = fuzz.fuzz_campaign(fuzz.CampaignConfig(spec, 20, 60, workers=4))
    assert report.executions == 80


@given(st.integers(0, 10**6))
def test_generated_programs_parse_and_finish(seed):
    from helpers import run
    program = fuzz.generate_program(random.Random(seed))
    assert m.parse_program(m.render_program(program)) == program
    assert run(program, seed=seed)[1].kind == "completed"
