"""Bug oracles: heap-fault classification, deadlock cycles, data races."""

from __future__ import annotations

from dataclasses import dataclass

from cctsim import model as m
from cctsim import vm as v
from cctsim.model import Program

DATA_RACE = "DataRace"
DEADLOCK = "Deadlock"
BUG_KINDS = (DATA_RACE, DEADLOCK, v.UAF, v.NULL_DEREF, v.DOUBLE_FREE, v.ASSERTION_FAILURE, v.MODEL_ERROR)


@dataclass(frozen=True)
class BugReport:
    kind: str
    detail: str = ""
    event_index: int | None = None  # faulting event (heap faults, assertions)
    obj: str | None = None
    tids: tuple = ()
    events: tuple = ()  # racing access indices
    cycle: tuple = ()  # wait-for cycle as thread names, first == last

    def as_dict(self) -> dict:
        out = {"kind": self.kind, "detail": self.detail}
        if self.event_index is not None:
            out["event_index"] = self.event_index
        if self.obj is not None:
            out["obj"] = self.obj
        if self.tids:
            out["tids"] = list(self.tids)
        if self.events:
            out["events"] = list(self.events)
        if self.cycle:
            out["cycle"] = list(self.cycle)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BugReport":
        return cls(d["kind"], d.get("detail", ""), d.get("event_index"), d.get("obj"),
                   tuple(d.get("tids", ())), tuple(d.get("events", ())), tuple(d.get("cycle", ())))


def classify_fault(result: v.StepResult, event_index: int, tid: int) -> BugReport:
    """Map a VM fault onto a bug report citing the faulting trace event."""
    if result.status != v.FAULT:
        raise ValueError("classify_fault needs a faulting step result")
    obj = result.tgt if result.tgt is not None else result.event.target
    if result.event.kind not in m.MEMORY_EVENTS:
        obj = result.tgt
    return BugReport(result.fault, result.detail, event_index, obj, (tid,))


# --------------------------------------------------------------------------
# Deadlock
# --------------------------------------------------------------------------


def wait_for_graph(vm: v.VmState, subset: int | None = None) -> dict:
    """Edges from each blocked task to the tasks it waits on."""
    subsets = range(len(vm.instances)) if subset is None else [subset]
    graph: dict = {}
    for g in subsets:
        inst = vm.instances[g]
        for tid in vm.blocked_set(g):
            ctx = vm.tasks[tid]
            kind, name = ctx.block
            if kind in ("lock", "spinwait"):
                lock = inst.locks[name]
                targets = [] if lock.holder is None else [lock.holder]
                if ctx.next_event().arg != "read":
                    targets += sorted(lock.readers)
            elif kind == "join":
                target = inst.base + inst.program.thread_index[name]
                c = vm.tasks.get(target)
                targets = [target] if c is not None and c.state is not v.EXITED else []
            else:
                arrived = set(inst.barriers.get(name, ()))
                targets = [t for t in inst.tids if t not in arrived and vm.tasks[t].state is not v.EXITED]
            graph[tid] = [t for t in targets if t != tid] if kind == "barrier" else targets
    return graph


def find_cycle(graph: dict) -> list | None:
    """First cycle found by DFS from the lowest node, as ``[a, b, ..., a]``."""
    color: dict = {}
    stack: list = []

    def visit(node):
        color[node] = 1
        stack.append(node)
        for nxt in graph.get(node, ()):
            if color.get(nxt) == 1:
                return stack[stack.index(nxt):] + [nxt]
            if nxt not in color:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        color[node] = 2
        return None

    for start in sorted(graph):
        if start not in color:
            found = visit(start)
            if found:
                return found
    return None


def check_deadlock(vm: v.VmState, subset: int | None = None) -> BugReport | None:
    """Explain a stall: the wait-for cycle if there is one, otherwise the
    whole blocked set."""
    graph = wait_for_graph(vm, subset)
    if not graph:
        return None
    cycle = find_cycle(graph)
    names = vm.thread_name
    if cycle:
        return BugReport(DEADLOCK, "wait-for cycle " + " -> ".join(names(t) for t in cycle),
                         tids=tuple(cycle[:-1]), cycle=tuple(names(t) for t in cycle))
    blocked = sorted(graph)
    return BugReport(DEADLOCK, "all tasks blocked, no wait-for cycle", tids=tuple(blocked))


# --------------------------------------------------------------------------
# Data races (vector-clock happens-before)
# --------------------------------------------------------------------------


def _layout(programs) -> tuple:
    """tid -> (subset, program, thread name)."""
    if isinstance(programs, Program):
        programs = [programs]
    info = {}
    entries = []
    base = 0
    for g, prog in enumerate(programs):
        for i, (name, _) in enumerate(prog.threads):
            info[base + i] = (g, prog, name)
        entries.append(base + prog.thread_index[prog.entry])
        base += len(prog.threads)
    return info, entries


def _join(into: dict, other: dict) -> None:
    for k, val in other.items():
        if into.get(k, 0) < val:
            into[k] = val


def check_race(trace, programs) -> list:
    """Report unordered conflicting access pairs in a completed trace.

    Happens-before combines program order, release->acquire on the same
    lock, spawn->child, child exit->join and barrier arrivals->departures.
    Reports are deduplicated by (object, source event pair).
    """
    info, entries = _layout(programs)
    clocks: dict = {t: {t: 1} for t in entries}
    lock_clocks: dict = {}
    exit_clocks: dict = {}
    barriers: dict = {}
    accesses: dict = {}
    seen: set = set()
    reports = []
    for idx, e in enumerate(trace.events):
        t = e.tid
        g, prog, thread = info[t]
        c = clocks.setdefault(t, {t: 1})
        kind = e.ev
        if kind in m.MEMORY_EVENTS:
            if kind == m.DEREF:
                touched = [(e.obj, False)] + ([(e.tgt, False)] if e.tgt else [])
            else:
                touched = [(e.obj, kind != m.LOAD)]
            for obj, write in touched:
                key = (g, obj)
                lst = accesses.setdefault(key, [])
                for (ot, epoch, owrite, oidx, osrc) in lst:
                    if ot != t and (write or owrite) and epoch > c.get(ot, 0):
                        src = (osrc, (thread, e.pc))
                        dedup = (obj, min(src), max(src))
                        if dedup in seen:
                            continue
                        seen.add(dedup)
                        reports.append(BugReport(
                            DATA_RACE, f"unordered accesses to {obj}: {osrc[0]}@{osrc[1]} vs {thread}@{e.pc}",
                            obj=obj, tids=(ot, t), events=(oidx, idx)))
                lst.append((t, c[t], write, idx, (thread, e.pc)))
        elif kind == m.ACQUIRE:
            _join(c, lock_clocks.get((g, e.obj), {}))
        elif kind == m.RELEASE:
            _join(lock_clocks.setdefault((g, e.obj), {}), c)
        elif kind == m.SPAWN:
            child = info_tid(info, g, prog, e.obj)
            cc = dict(c)
            cc[child] = cc.get(child, 0) + 1
            clocks[child] = cc
        elif kind == m.JOIN:
            _join(c, exit_clocks.get(info_tid(info, g, prog, e.obj), {}))
        elif kind == m.EXIT:
            exit_clocks[t] = dict(c)
        elif kind == m.BARRIER:
            arrivers, bclock = barriers.setdefault((g, e.obj), ([], {}))
            arrivers.append(t)
            _join(bclock, c)
            if len(arrivers) >= e.val:
                for a in arrivers:
                    _join(clocks[a], bclock)
                barriers[(g, e.obj)] = ([], {})
        c[t] += 1
    return reports


def info_tid(info: dict, subset: int, prog: Program, thread: str) -> int:
    for tid, (g, p, name) in info.items():
        if g == subset and name == thread:
            return tid
    raise KeyError(thread)
