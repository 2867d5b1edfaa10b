from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from cctsim import fuzz, model as m
from cctsim.model import Call, CallSequence


def test_minimal_program():
    p = m.parse_program("object x 0\nthread main:\n store x 1\n exit")
    assert len(p.objects) == 1
    assert len(p.threads) == 1
    assert len(p.threads[0][1]) == 2
    assert p.entry == "main"


def test_unknown_lock_reports_position():
    with pytest.raises(m.UnknownName) as info:
        m.parse_program("thread main:\n acquire L")
    assert info.value.name == "L"
    assert info.value.line == 2
    assert info.value.col > 0


def test_duplicate_and_syntax_errors():
    with pytest.raises(m.DuplicateName):
        m.parse_program("object x 0\nobject x 1\nthread main:\n exit")
    with pytest.raises(m.DslSyntaxError):
        m.parse_program("object x 0\nthread main:\n store x")
    with pytest.raises(m.DslSyntaxError):
        m.parse_program("object x 0\nthread main:\n frobnicate x")


def test_labels_must_resolve_within_thread():
    with pytest.raises(m.UnknownName):
        m.parse_program("thread main:\n goto nowhere\n exit")
    with pytest.raises(m.UnknownName):
        m.parse_program("thread main:\n goto l\nthread t:\n label l\n exit")


def test_object_ids_are_one_based_and_pointers_resolve():
    p = m.parse_program("object a 0\nobject b 5\nobject ptr &b\nthread main:\n deref ptr r0\n exit")
    assert p.object_ids == {"a": 1, "b": 2, "ptr": 3}
    assert dict(p.objects)["ptr"] == 2
    assert p.object_names[0] == "null"


def test_entry_defaults_and_explicit():
    p = m.parse_program("thread w:\n exit\nthread main:\n exit")
    assert p.entry == "main"
    p = m.parse_program("thread w:\n exit\nthread v:\n exit")
    assert p.entry == "w"
    p = m.parse_program("entry v\nthread w:\n exit\nthread v:\n exit")
    assert p.entry == "v"


def test_acquire_default_modes():
    p = m.parse_program("lock a mutex\nlock b rwsem\nthread main:\n acquire a\n acquire b\n release b\n release a\n exit")
    ev = p.threads[0][1]
    assert ev[0].arg == "excl" and ev[1].arg == "write"


def test_expressions_parse():
    p = m.parse_program("object x 0\nthread main:\n load x r0\n store x r0 + 3\n assert r0 != 2\n br r0 < 9 l\n label l\n exit")
    store = p.threads[0][1][1]
    assert store.arg == m.BinOp("r0", "+", m.Const(3))


def test_comments_and_blank_lines():
    text = "# header\nobject x 0  # trailing\n\nthread main:\n  store x 1 # set\n"
    assert len(m.parse_program(text).threads[0][1]) == 1


@given(st.integers(min_value=0, max_value=10_000))
def test_render_parse_round_trip(seed):
    program = fuzz.generate_program(random.Random(seed))
    assert m.parse_program(m.render_program(program)) == program


def test_race1_enumerates_two_orders(catalog, enumerations):
    assert len(enumerations["race1"]) == 2


# ---------------------------------------------------------------- targets

PING = "object x 0\nproc ping():\n  store x 1\n"
TRIM = "object x 0\nproc trim(flag: 0..1):\n  store x $flag\n"


def test_target_spec_basic():
    spec = m.parse_target_spec(PING)
    assert len(spec.procedures) == 1
    assert spec.procedures[0].params == ()


def test_range_checked_at_instantiation():
    spec = m.parse_target_spec(TRIM)
    m.instantiate_input(spec, CallSequence((Call("trim", (1,)),)))
    with pytest.raises(m.RangeViolation):
        m.instantiate_input(spec, CallSequence((Call("trim", (2,)),)))


def test_target_spec_errors():
    with pytest.raises(m.EmptyRange):
        m.parse_target_spec("object x 0\nproc f(a: 3..1):\n  store x $a\n")
    with pytest.raises(m.UnknownName):
        m.parse_target_spec("object x 0\nproc f():\n  store y 1\n")
    with pytest.raises(m.UnknownName):
        m.parse_target_spec("object x 0\nproc f(a: 0..1):\n  store x $b\n")
    with pytest.raises(m.DslSyntaxError):
        m.parse_target_spec("object x 0\nproc f():\n  spawn g\n")


def test_target_round_trip(catalog):
    spec = catalog["jfs_toy"].spec
    assert m.parse_target_spec(m.render_target_spec(spec)) == spec


def test_call_sequence_round_trip():
    seq = CallSequence((Call("a", (1, 2)), Call("b", (), True)))
    assert m.parse_call_sequence(m.render_call_sequence(seq)) == seq


def test_instantiate_inline_sync():
    spec = m.parse_target_spec(PING)
    p = m.instantiate_input(spec, CallSequence((Call("ping"),)))
    assert len(p.threads) == 1
    assert [e.kind for e in p.threads[0][1]] == ["store", "exit"]


def test_instantiate_empty_sequence():
    p = m.instantiate_input(m.parse_target_spec(PING), CallSequence())
    assert p.threads == (("main", (m.EXIT_EVENT,)),)


def test_instantiate_async_shape():
    spec = m.parse_target_spec("object x 0\nproc a():\n store x 1\nproc b():\n store x 2\nproc c():\n store x 3\n")
    seq = CallSequence((Call("a"), Call("a", (), True), Call("b"), Call("c"), Call("c", (), True)))
    p = m.instantiate_input(spec, seq)
    main = p.threads[0][1]
    kinds = [(e.kind, e.target) for e in main]
    assert kinds == [("store", "x"), ("spawn", "async0_a"), ("store", "x"), ("store", "x"),
                     ("spawn", "async1_c"), ("join", "async0_a"), ("join", "async1_c"), ("exit", None)]
    for name, events in p.threads[1:]:
        assert events[0] == m.Event(m.BARRIER, m.ASYNC_BARRIER, 2)
        assert events[-1] == m.EXIT_EVENT
    assert not any(e.kind == m.BARRIER for e in main)


@given(st.lists(st.tuples(st.sampled_from("ab"), st.booleans()), max_size=8))
def test_instantiate_invariants(calls):
    spec = m.parse_target_spec("object x 0\nproc a():\n store x 1\nproc b():\n load x r0\n")
    seq = CallSequence(tuple(Call(p, (), flag) for p, flag in calls))
    prog = m.instantiate_input(spec, seq)
    n_async = sum(flag for _, flag in calls)
    spawns = [e for e in prog.threads[0][1] if e.kind == m.SPAWN]
    assert len(spawns) == n_async == len(prog.threads) - 1
    for _, events in prog.threads[1:]:
        assert events[0].arg == n_async
    # the output is itself a valid program
    assert m.parse_program(m.render_program(prog)) == prog


def test_template_labels_are_prefixed_per_call():
    spec = m.parse_target_spec("object x 0\nproc f():\n  br 1 l\n  label l\n")
    p = m.instantiate_input(spec, CallSequence((Call("f"), Call("f"))))
    labels = [e.target for e in p.threads[0][1] if e.kind == m.LABEL]
    assert labels == ["c0_l", "c1_l"]
