"""Planted-bug benchmarks and the exhaustive interleaving enumerator.

The enumerator is the test oracle for the randomized schedulers: it
explores every scheduling choice of a small program and classifies each
maximal interleaving with the VM and the oracles.

Two runs belong to the same interleaving when they execute the same
sequence of shared-state events (``SAMPLED_KINDS``, identified by task and
program counter) and end in the same outcome class. Everything else a task
does is private to it, so where exactly a switch lands between two shared
events does not change what other tasks can observe.
"""

from __future__ import annotations

import json
import sys
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from types import SimpleNamespace

from cctsim import model as m
from cctsim import oracles
from cctsim import vm as v
from cctsim.model import Program
from cctsim.scheduler import BUG, COMPLETED, DEADLOCK, SAMPLED_KINDS, Outcome, _event_of

DEFAULT_MAX_STATES = 10**6

# Events that only touch the running task's registers and pc. A switch
# right before one of them is equivalent to a switch before the next
# non-local event, so the enumerator does not branch there.
_LOCAL = frozenset({m.BR, m.GOTO, m.COMPUTE, m.YIELD})


class StateBoundExceeded(Exception):
    pass


def interleaving_key(events, outcome_kind: str, bug_kind: str | None = None) -> tuple:
    """Shared-event projection of a run plus its outcome class."""
    visible = tuple((e.tid, e.pc) for e in events if e.ev in SAMPLED_KINDS)
    return visible, outcome_class(outcome_kind, bug_kind)


def outcome_class(outcome_kind: str, bug_kind: str | None = None) -> str:
    if outcome_kind == BUG and bug_kind:
        return bug_kind
    return outcome_kind


def trace_key(trace, outcome: Outcome) -> tuple:
    return interleaving_key(trace.events, outcome.kind, outcome.report.kind if outcome.report else None)


@dataclass(frozen=True)
class Interleaving:
    key: tuple
    outcome: str  # completed | bug | deadlock
    bugs: frozenset  # bug kinds observed, DataRace included
    schedule: tuple  # chosen tid at every branch point
    events: tuple  # TraceEvent list of the representative run

    @property
    def cls(self) -> str:
        return self.key[1]


@dataclass
class Enumeration:
    interleavings: dict = field(default_factory=dict)  # key -> Interleaving
    states: int = 0

    def __len__(self) -> int:
        return len(self.interleavings)

    @property
    def keys(self) -> set:
        return set(self.interleavings)

    @property
    def outcome_classes(self) -> Counter:
        return Counter(i.cls for i in self.interleavings.values())

    def bug_ratio(self, kind: str) -> float:
        if not self.interleavings:
            return 0.0
        hits = sum(1 for i in self.interleavings.values() if kind in i.bugs)
        return hits / len(self.interleavings)


def _branchable(ctx: v.TaskContext) -> bool:
    return ctx.preemptible() and ctx.next_event().kind not in _LOCAL


def brute_force_interleavings(program: Program, max_states: int = DEFAULT_MAX_STATES,
                              *, races: bool = True) -> Enumeration:
    """Depth-first search over every enabled task at every decision point.

    A decision point is any boundary where the running task is
    preemption-safe (and about to do something non-local), or where it
    blocked or exited. Unsafe boundaries force the running task on, as in
    the scheduler. Schedules that revisit a state on their own path are
    unfair loops and are pruned.

    Suffixes are memoized per VM state and deduplicated by their shared
    event projection, so the search is linear in distinct states rather
    than in paths.
    """
    result = Enumeration()
    memo: dict = {}
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 20_000))
    try:
        runs, _ = _dfs(v.VmState(program), set(), memo, result, max_states)
    finally:
        sys.setrecursionlimit(limit)
    for events, schedule, kind, report in runs.values():
        if kind == BUG:
            # fault indices were relative to the suffix that produced them
            report = replace(report, event_index=len(events) - 1)
        bugs = set()
        if report is not None:
            bugs.add(report.kind)
        if races and oracles.check_race(SimpleNamespace(events=events), program):
            bugs.add(oracles.DATA_RACE)
        key = interleaving_key(events, kind, report.kind if kind == BUG else None)
        result.interleavings.setdefault(key, Interleaving(key, kind, frozenset(bugs), schedule, events))
    return result


def _suffix_key(events, kind, report) -> tuple:
    return interleaving_key(events, kind, report.kind if report is not None and kind == BUG else None)


def _dfs(vm, on_path, memo, result, max_states):
    """Return ({suffix key: (events, schedule, kind, report)}, complete)."""
    if vm.alive(0) == 0:
        return {((), COMPLETED): ((), (), COMPLETED, None)}, True
    enabled = vm.enabled_set(0)
    if not enabled:
        report = oracles.check_deadlock(vm, 0)
        return {((), DEADLOCK): ((), (), DEADLOCK, report)}, True
    state = vm.state_key()
    hit = memo.get(state)
    if hit is not None:
        return hit, True
    if state in on_path:
        return {}, False
    result.states += 1
    if result.states > max_states:
        raise StateBoundExceeded(f"more than {max_states} states")
    on_path.add(state)
    out: dict = {}
    complete = True
    for tid in enabled:
        child = vm.clone() if len(enabled) > 1 else vm
        seg: list = []
        fault = _segment(child, tid, seg, max_states)
        seg = tuple(seg)
        if fault is not None:
            res, index = fault
            report = oracles.classify_fault(res, index, tid)
            out.setdefault(_suffix_key(seg, BUG, report), (seg, (tid,), BUG, report))
            continue
        runs, ok = _dfs(child, on_path, memo, result, max_states)
        complete = complete and ok
        for events, schedule, kind, report in runs.values():
            full = seg + events
            out.setdefault(_suffix_key(full, kind, report), (full, (tid,) + schedule, kind, report))
    on_path.discard(state)
    if complete:
        memo[state] = out
    return out, complete


def _segment(vm, tid, events, max_states):
    """Run ``tid`` up to its next decision point; return fault info or None."""
    ctx = vm.tasks[tid]
    ctx.state = v.RUNNING
    steps = 0
    while True:
        res = vm.step(tid)
        steps += 1
        if res.executed:
            events.append(_event_of(tid, res))
        if res.status is v.FAULT:
            return res, len(events) - 1
        if res.status is not v.PROGRESSED:
            return None
        if _branchable(ctx):
            break
        if steps > max_states:
            raise StateBoundExceeded(f"task {tid} ran {steps} steps without a decision point")
    ctx.state = v.ENQUEUED
    return None


# --------------------------------------------------------------------------
# Catalog
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkEntry:
    name: str
    program: Program
    expected: str  # bug kind, or "none"
    ratio: float  # enumerated bug ratio for ``expected``
    spec: m.TargetSpec | None = None
    calls: m.CallSequence | None = None
    interleavings: int | None = None


def _data(name: str) -> str:
    return resources.files(__name__).joinpath(name).read_text()


def catalog_records() -> list:
    return [json.loads(line) for line in _data("catalog.jsonl").splitlines() if line.strip()]


def load_entry(record: dict) -> BenchmarkEntry:
    spec = calls = None
    if "program" in record:
        program = m.parse_program(_data(record["program"]))
    else:
        spec = m.parse_target_spec(_data(record["spec"]))
        calls = m.parse_call_sequence(_data(record["calls"]))
        program = m.instantiate_input(spec, calls)
    return BenchmarkEntry(record["name"], program, record["expected"], record["ratio"], spec, calls,
                          record.get("interleavings"))


def planted_targets() -> list:
    """Every shipped benchmark, in catalog order."""
    return [load_entry(r) for r in catalog_records()]


def get(name: str) -> BenchmarkEntry:
    for r in catalog_records():
        if r["name"] == name:
            return load_entry(r)
    raise KeyError(f"unknown benchmark {name!r}")


def source(name: str) -> str:
    """Raw text of a shipped DSL file."""
    return _data(name)


def measure(program: Program, expected: str, max_states: int = DEFAULT_MAX_STATES) -> dict:
    """Enumerate ``program`` and summarize it as a catalog record body."""
    en = brute_force_interleavings(program, max_states)
    ratio = en.bug_ratio(expected) if expected != "none" else 0.0
    return {"interleavings": len(en), "ratio": ratio,
            "classes": dict(sorted(en.outcome_classes.items()))}


# --------------------------------------------------------------------------
# Trace audit
# --------------------------------------------------------------------------

_ENTER = {m.RCU_LOCK: "rcu", m.PREEMPT_DISABLE: "preempt", m.IRQ_DISABLE: "irq", m.NONBLOCK_ENTER: "nonblock"}
_LEAVE = {m.RCU_UNLOCK: "rcu", m.PREEMPT_ENABLE: "preempt", m.IRQ_ENABLE: "irq", m.NONBLOCK_EXIT: "nonblock"}


def audit_safety(trace, programs) -> list:
    """Decisions of reason ``sampled``/``slice`` taken while the task being
    switched away from was inside a non-preemptible section.

    Counters are rebuilt from the trace's event records alone; the VM is
    not consulted. Returns ``(decision position, tid, counters)`` triples.
    """
    from cctsim.scheduler import Decision

    info, _ = oracles._layout(programs)
    counters: dict = {}
    last: dict = {}  # subset -> tid of the last dispatch
    violations = []
    for pos, entry in enumerate(trace.entries):
        if type(entry) is Decision:
            prev = last.get(entry.subset)
            if entry.reason in ("sampled", "slice") and prev is not None:
                c = counters.get(prev, {})
                if any(c.values()):
                    violations.append((pos, prev, dict(c)))
            last[entry.subset] = entry.tid
            continue
        c = counters.setdefault(entry.tid, {"rcu": 0, "preempt": 0, "irq": 0, "nonblock": 0})
        ev = entry.ev
        if ev in _ENTER:
            c[_ENTER[ev]] += 1
        elif ev in _LEAVE:
            c[_LEAVE[ev]] -= 1
        elif ev in (m.ACQUIRE, m.RELEASE):
            kind = info[entry.tid][1].lock_kinds[entry.obj]
            delta = 1 if ev == m.ACQUIRE else -1
            if kind == "spin":
                c["preempt"] += delta
            elif kind == "rcu":
                c["rcu"] += delta
    return violations
