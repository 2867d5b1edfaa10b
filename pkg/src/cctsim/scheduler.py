"""Controlled scheduler: serialized execution under a pluggable strategy.

One task per subset runs at a time. The scheduler is re-entered at
scheduling points:

* the running task blocks or exits (``blocked``);
* before a load/store/deref/free/acquire/release, when the task is
  preemption-safe and a Bernoulli(sample_rate) draw succeeds, and after a
  ``yield`` (``sampled``);
* at the first safe boundary once the dispatch has used ``slice_events``
  units, or after a detected busy-wait (``slice``);
* the first decision of each subset is ``spawnwake``; a starvation override
  is ``fairness``.

Every decision and executed event is appended to a :class:`Trace`, which
serializes to JSON Lines and replays bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from cctsim import model as m
from cctsim import oracles
from cctsim import vm as v
from cctsim.algos import StrategyConfig, make_strategy
from cctsim.model import Program

SAMPLED_KINDS = frozenset({m.LOAD, m.STORE, m.DEREF, m.FREE, m.ACQUIRE, m.RELEASE})
REASONS = ("sampled", "blocked", "slice", "spawnwake", "fairness")

COMPLETED = "completed"
BUG = "bug"
DEADLOCK = "deadlock"
LIVELOCK = "livelock"

TRACE_VERSION = 1


class EmptyEnabledSet(Exception):
    pass


class HashMismatch(Exception):
    pass


class Divergence(Exception):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"replay diverged at decision {step}: {detail}" if detail else f"replay diverged at decision {step}")


@dataclass(frozen=True)
class SchedParams:
    sample_rate: float = 0.1
    slice_events: int | None = 20  # None: unlimited
    max_steps: int = 1_000_000
    fairness_bound: int | None = 100_000  # None: off
    spin_window: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in [0, 1]")
        for name in ("slice_events", "fairness_bound"):
            val = getattr(self, name)
            if val is not None and val < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps < 1 or self.spin_window < 1:
            raise ValueError("max_steps and spin_window must be >= 1")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def as_dict(self) -> dict:
        return {"sample_rate": self.sample_rate, "slice_events": self.slice_events,
                "max_steps": self.max_steps, "fairness_bound": self.fairness_bound,
                "spin_window": self.spin_window, "rng_seed": self.rng_seed}


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def subset_seed(seed: int, subset: int) -> int:
    return seed if subset == 0 else derive_seed(seed, "subset", subset)


def program_hash(programs) -> str:
    if isinstance(programs, Program):
        programs = [programs]
    h = hashlib.sha256()
    for p in programs:
        h.update(_digest(p))
    return h.hexdigest()


def _digest(program: Program) -> bytes:
    # cached on the (immutable) program instance
    cache = program.__dict__
    d = cache.get("_render_digest")
    if d is None:
        d = cache["_render_digest"] = hashlib.sha256(m.render_program(program).encode()).digest()
    return d


# --------------------------------------------------------------------------
# Trace
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Decision:
    step: int
    subset: int
    tid: int
    reason: str

    def record(self) -> dict:
        return {"step": self.step, "subset": self.subset, "tid": self.tid, "reason": self.reason}


@dataclass(frozen=True, slots=True)
class TraceEvent:
    tid: int
    pc: int
    ev: str
    obj: str | None = None
    val: int | None = None
    tgt: str | None = None
    mode: str | None = None

    def record(self) -> dict:
        out = {"tid": self.tid, "pc": self.pc, "ev": self.ev}
        if self.obj is not None:
            out["obj"] = self.obj
        if self.val is not None:
            out["val"] = self.val
        if self.tgt is not None:
            out["tgt"] = self.tgt
        if self.mode is not None:
            out["mode"] = self.mode
        return out


def _event_of(tid: int, res: v.StepResult) -> TraceEvent:
    ev = res.event
    k = ev.kind
    if k == m.ACQUIRE:
        return TraceEvent(tid, res.pc, k, ev.target, None, None, ev.arg if ev.arg != "excl" else None)
    if k in (m.BR, m.ASSERT, m.COMPUTE):
        return TraceEvent(tid, res.pc, k, None, res.val)
    return TraceEvent(tid, res.pc, k, ev.target, res.val, res.tgt)


@dataclass
class Trace:
    header: dict
    entries: list = field(default_factory=list)  # Decision | TraceEvent in order

    @property
    def decisions(self) -> list:
        return [e for e in self.entries if type(e) is Decision]

    @property
    def events(self) -> list:
        return [e for e in self.entries if type(e) is TraceEvent]

    def to_jsonl(self) -> str:
        dumps = json.dumps
        lines = [dumps(self.header, separators=(",", ":"), sort_keys=True)]
        lines += [dumps(e.record(), separators=(",", ":")) for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty trace")
        header = json.loads(lines[0])
        if header.get("type") != "header":
            raise ValueError("first trace record must be the header")
        entries = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            if "reason" in rec:
                if rec["reason"] not in REASONS:
                    raise ValueError(f"unknown decision reason {rec['reason']!r}")
                entries.append(Decision(rec["step"], rec["subset"], rec["tid"], rec["reason"]))
            else:
                entries.append(TraceEvent(rec["tid"], rec["pc"], rec["ev"], rec.get("obj"),
                                          rec.get("val"), rec.get("tgt"), rec.get("mode")))
        return cls(header, entries)

    @classmethod
    def read(cls, path) -> "Trace":
        return cls.from_jsonl(Path(path).read_text())

    def params(self) -> SchedParams:
        return SchedParams(**self.header["params"])


@dataclass(frozen=True)
class Outcome:
    kind: str  # completed | bug | deadlock | livelock
    report: oracles.BugReport | None = None
    blocked: tuple = ()
    heaps: tuple = ()
    steps: int = 0

    @property
    def heap(self) -> dict | None:
        return self.heaps[0] if self.heaps else None

    @property
    def is_bug(self) -> bool:
        return self.kind in (BUG, DEADLOCK)

    def summary(self) -> dict:
        out = {"outcome": self.kind, "steps": self.steps}
        if self.report is not None:
            out["bug"] = self.report.kind
            if self.report.event_index is not None:
                out["event"] = self.report.event_index
            if self.report.obj is not None:
                out["obj"] = self.report.obj
            if self.report.cycle:
                out["cycle"] = "->".join(self.report.cycle)
        if self.blocked:
            out["blocked"] = ",".join(str(t) for t in self.blocked)
        return out


# --------------------------------------------------------------------------
# Decision rule
# --------------------------------------------------------------------------


def decision_point(weights: dict, enabled, ages: dict | None = None,
                   fairness_bound: int | None = None) -> tuple:
    """Pick the enabled task to dispatch.

    Returns ``(tid, reason)`` where ``reason`` is ``"fairness"`` when the
    starvation override fired, else None. Ties break to the lowest tid.
    """
    if not enabled:
        raise EmptyEnabledSet("no enabled task in subset")
    if fairness_bound is not None and ages:
        oldest = max(enabled, key=lambda t: (ages.get(t, 0), -t))
        if ages.get(oldest, 0) > fairness_bound:
            return oldest, "fairness"
    best = max(enabled, key=lambda t: (weights.get(t, 0.0), -t))
    return best, None


# --------------------------------------------------------------------------
# Execution
# --------------------------------------------------------------------------


@dataclass
class Execution:
    trace: Trace
    outcome: Outcome
    vm: v.VmState


def _as_list(programs) -> list:
    return [programs] if isinstance(programs, Program) else list(programs)


def _header(programs, config: StrategyConfig, params: SchedParams) -> dict:
    return {
        "type": "header",
        "version": TRACE_VERSION,
        "program_hash": program_hash(programs),
        "subsets": len(programs),
        "strategy": config.as_dict(),
        "seed": params.rng_seed,
        "params": params.as_dict(),
    }


class _Run:
    def __init__(self, programs, config: StrategyConfig, params: SchedParams, check: bool):
        self.programs = programs
        self.params = params
        self.check = check
        self.vm = v.VmState(programs)
        self.trace = Trace(_header(programs, config, params))
        self.outcome: Outcome | None = None
        n = len(programs)
        self.strategies = []
        self.sample_rngs = []
        self.rates = []
        self.slices = []
        for g, prog in enumerate(programs):
            seed = subset_seed(params.rng_seed, g)
            inst = self.vm.instances[g]
            events = 1
            if config.kind == "pct":
                events = config.pct_events or estimate_event_count(prog, replace(params, rng_seed=seed))
            tids = [inst.base + i for i in range(len(prog.threads))]
            strat = make_strategy(config, random.Random(derive_seed(seed, "strategy")), tids, events)
            over = strat.scheduler_overrides()
            self.rates.append(over.get("sample_rate", params.sample_rate))
            self.slices.append(over.get("slice_events", params.slice_events))
            self.sample_rngs.append(random.Random(derive_seed(seed, "sample")))
            strat.on_spawn(inst.tids[0])
            self.strategies.append(strat)
        self.current = [None] * n
        self.last_event = [None] * n
        self.reason = ["spawnwake"] * n
        self.finished = [False] * n

    def run(self) -> Outcome:
        n = len(self.programs)
        while self.outcome is None:
            progressed = False
            for g in range(n):
                if self.finished[g]:
                    continue
                progressed = True
                self._turn(g)
                if self.outcome is not None:
                    break
            if not progressed:
                self._finish(COMPLETED)
        return self.outcome

    def _finish(self, kind, report=None, blocked=()):
        heaps = tuple(inst.heap_snapshot() for inst in self.vm.instances)
        self.outcome = Outcome(kind, report, tuple(blocked), heaps, self.vm.steps)

    def _turn(self, g: int) -> None:
        vm = self.vm
        if vm.instances[g].alive == 0:
            self.finished[g] = True
            return
        enabled = vm.enabled_set(g)
        if not enabled:
            report = oracles.check_deadlock(vm, g)
            self._finish(DEADLOCK, report, vm.blocked_set(g))
            return
        strat = self.strategies[g]
        tasks = vm.tasks
        last = self.current[g]
        next_events = None
        if strat.uses_next_events:
            next_events = {t: tasks[t].next_event() for t in enabled}
        strat.on_decision(last, self.last_event[g], enabled, next_events)
        weights = strat.weights
        bound = self.params.fairness_bound
        ages = {t: tasks[t].starvation_age for t in enabled} if bound is not None else None
        tid, override = decision_point(weights, enabled, ages, bound)
        for t in enabled:
            ctx = tasks[t]
            ctx.weight = weights.get(t, 0.0)
            ctx.starvation_age = 0 if t == tid else ctx.starvation_age + 1
        self.trace.entries.append(Decision(vm.steps, g, tid, override or self.reason[g]))
        self._dispatch(g, tid)

    def _dispatch(self, g: int, tid: int) -> None:
        vm = self.vm
        ctx = vm.tasks[tid]
        inst = vm.instances[g]
        strat = self.strategies[g]
        rate = self.rates[g]
        slice_events = self.slices[g]
        srng = self.sample_rngs[g]
        max_steps = self.params.max_steps
        spin_window = self.params.spin_window
        entries = self.trace.entries
        check = self.check
        self.current[g] = tid
        self.last_event[g] = None
        ctx.state = v.RUNNING
        used = 0
        force = False
        reason = "blocked"
        while True:
            if used and ctx.preemptible():
                if force or (slice_events is not None and used >= slice_events):
                    reason = "slice"
                    break
                if rate > 0.0 and ctx.next_event().kind in SAMPLED_KINDS:
                    if rate >= 1.0 or srng.random() < rate:
                        reason = "sampled"
                        break
            if vm.steps >= max_steps:
                self._finish(LIVELOCK)
                return
            res = vm.step(tid)
            if check:
                vm.check_invariants()
            ev = res.event
            if res.executed:
                entries.append(_event_of(tid, res))
                strat.on_event(tid)
                self.last_event[g] = ev
                if ev.kind == m.SPAWN and res.status is v.PROGRESSED:
                    strat.on_spawn(inst.base + inst.program.thread_index[ev.target])
            status = res.status
            if status is v.FAULT:
                index = sum(1 for e in entries if type(e) is TraceEvent) - 1
                self._finish(BUG, oracles.classify_fault(res, index, tid))
                return
            if status is not v.PROGRESSED:
                break
            used += ev.arg.value if ev.kind == m.COMPUTE else 1
            if ev.kind == m.YIELD and ctx.preemptible():
                reason = "sampled"
                break
            if ctx.consecutive_silent_steps >= spin_window:
                ctx.consecutive_silent_steps = 0
                force = True
                strat.on_busy_wait(tid)
        if ctx.state is v.RUNNING:
            ctx.state = v.ENQUEUED
        self.reason[g] = reason


def execute(programs, config: StrategyConfig, params: SchedParams, *, check: bool = False) -> Execution:
    """Run once and keep the final VM state (coverage, heap) alongside."""
    programs = _as_list(programs)
    run = _Run(programs, config, params, check)
    outcome = run.run()
    return Execution(run.trace, outcome, run.vm)


def run_controlled(programs, config: StrategyConfig, params: SchedParams) -> tuple:
    """Serialized run of one program (or several isolated instances)."""
    ex = execute(programs, config, params)
    return ex.trace, ex.outcome


def estimate_event_count(program, params: SchedParams) -> int:
    """Event count of one random-walk trial run, at least 1."""
    run = _Run(_as_list(program), StrategyConfig("rw"), params, False)
    run.run()
    return max(1, sum(1 for e in run.trace.entries if type(e) is TraceEvent))


# --------------------------------------------------------------------------
# Replay
# --------------------------------------------------------------------------


def replay(programs, trace: Trace, *, return_trace: bool = False):
    """Re-execute ``trace`` forcing every recorded decision.

    Raises :class:`HashMismatch` for a different program and
    :class:`Divergence` when a decision or event cannot be reproduced.
    """
    programs = _as_list(programs)
    if trace.header.get("program_hash") != program_hash(programs):
        raise HashMismatch("trace was recorded against a different program")
    params = trace.params()
    vm = v.VmState(programs)
    out = Trace(dict(trace.header))
    decisions = trace.decisions
    recorded = trace.events
    produced: list = []

    def finish(kind, report=None, blocked=()):
        heaps = tuple(inst.heap_snapshot() for inst in vm.instances)
        outcome = Outcome(kind, report, tuple(blocked), heaps, vm.steps)
        return (out, outcome) if return_trace else outcome

    for i, d in enumerate(decisions):
        if vm.steps != d.step:
            raise Divergence(i, f"expected step {d.step}, at {vm.steps}")
        if d.tid not in vm.tasks or d.tid not in vm.enabled_set(d.subset):
            raise Divergence(i, f"task {d.tid} not enabled")
        out.entries.append(d)
        end = decisions[i + 1].step if i + 1 < len(decisions) else None
        ctx = vm.tasks[d.tid]
        ctx.state = v.RUNNING
        while end is None or vm.steps < end:
            if vm.steps >= params.max_steps:
                return finish(LIVELOCK)
            res = vm.step(d.tid)
            if res.executed:
                te = _event_of(d.tid, res)
                k = len(produced)
                if k >= len(recorded) or recorded[k] != te:
                    raise Divergence(i, f"event {k} differs from the recording")
                produced.append(te)
                out.entries.append(te)
            if res.status is v.FAULT:
                return finish(BUG, oracles.classify_fault(res, len(produced) - 1, d.tid))
            if res.status is not v.PROGRESSED:
                break
        if end is not None and vm.steps != end:
            raise Divergence(i + 1, f"dispatch ended at step {vm.steps}, recorded {end}")
        if ctx.state is v.RUNNING:
            ctx.state = v.ENQUEUED
    if len(produced) != len(recorded):
        raise Divergence(len(decisions), "trace has events after the last dispatch")
    if vm.steps >= params.max_steps:
        return finish(LIVELOCK)
    for g in range(len(vm.instances)):
        if vm.alive(g) and not vm.enabled_set(g):
            return finish(DEADLOCK, oracles.check_deadlock(vm, g), vm.blocked_set(g))
    if any(vm.alive(g) for g in range(len(vm.instances))):
        raise Divergence(len(decisions), "trace ends while tasks can still run")
    return finish(COMPLETED)
