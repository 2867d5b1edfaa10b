"""Event interpreter: heap, locks, barriers and per-task safety counters.

A :class:`VmState` hosts one or more program instances ("subsets"). Each
instance has its own heap and lock table; tasks of different instances
never interact. Task ids are ``instance base + thread declaration index``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from cctsim import model as m
from cctsim.model import Const, Program, Reg

RUNNING = "running"
ENQUEUED = "enqueued"
BLOCKED = "blocked"
EXITED = "exited"

# Step statuses.
PROGRESSED = "progressed"
NOW_BLOCKED = "blocked"
TASK_EXITED = "exited"
FAULT = "fault"

# Fault kinds (shared with oracles.BugReport.kind).
NULL_DEREF = "NullDeref"
UAF = "UAF"
DOUBLE_FREE = "DoubleFree"
ASSERTION_FAILURE = "AssertionFailure"
MODEL_ERROR = "ModelError"

_MASK = (1 << 64) - 1
_SIGN = 1 << 63

# Events that change shared state; used to detect busy-wait loops.
_NOISY = frozenset({m.STORE, m.FREE, m.ALLOC, m.ACQUIRE, m.RELEASE})


def wrap64(value: int) -> int:
    value &= _MASK
    return value - (1 << 64) if value & _SIGN else value


@dataclass(slots=True, eq=False)
class TaskContext:
    tid: int
    thread: str
    subset: int
    code: m.ThreadCode
    pc: int = 0
    regs: dict = field(default_factory=dict)
    state: str = ENQUEUED
    block: tuple | None = None
    preempt_count: int = 0
    irq_depth: int = 0
    rcu_depth: int = 0
    non_block_count: int = 0
    weight: float = 0.0
    starvation_age: int = 0
    consecutive_silent_steps: int = 0

    @property
    def enabled(self) -> bool:
        return self.state is RUNNING or self.state is ENQUEUED

    @property
    def irqs_disabled(self) -> bool:
        return self.irq_depth > 0

    def preemptible(self) -> bool:
        return not (self.preempt_count or self.irq_depth or self.rcu_depth or self.non_block_count)

    def next_event(self) -> m.Event:
        events = self.code.events
        return events[self.pc] if self.pc < len(events) else m.EXIT_EVENT


def safety_ok(ctx: TaskContext) -> bool:
    """True when the task may be voluntarily descheduled at this boundary.

    Mirrors the kernel ``might_sleep``-style checks: running, outside
    non-blocking sections, preemption and interrupts enabled, no RCU
    read-side section. Idle tasks do not exist in the model.
    """
    return (
        ctx.state is RUNNING
        and ctx.non_block_count == 0
        and ctx.preempt_count == 0
        and ctx.irq_depth == 0
        and ctx.rcu_depth == 0
    )


@dataclass(slots=True, eq=False)
class LockState:
    kind: str
    holder: int | None = None
    readers: dict = field(default_factory=dict)  # tid -> depth
    waiters: set = field(default_factory=set)

    def copy(self) -> "LockState":
        return LockState(self.kind, self.holder, dict(self.readers), set(self.waiters))


class Instance:
    """Mutable state of one program instance (one scheduling subset)."""

    __slots__ = ("program", "subset", "base", "values", "freed", "locks", "barriers",
                 "joiners", "spawned", "alive", "tids")

    def __init__(self, program: Program, subset: int, base: int):
        self.program = program
        self.subset = subset
        self.base = base
        self.values = [0] + [v for _, v in program.objects]
        self.freed = [False] * len(self.values)
        self.locks = {name: LockState(kind) for name, kind in program.locks}
        self.barriers: dict = {}
        self.joiners: dict = {}
        self.spawned: set = set()
        self.alive = 0
        self.tids: list = []

    def copy(self) -> "Instance":
        new = Instance.__new__(Instance)
        new.program = self.program
        new.subset = self.subset
        new.base = self.base
        new.values = list(self.values)
        new.freed = list(self.freed)
        new.locks = {k: v.copy() for k, v in self.locks.items()}
        new.barriers = {k: list(v) for k, v in self.barriers.items()}
        new.joiners = {k: set(v) for k, v in self.joiners.items()}
        new.spawned = set(self.spawned)
        new.alive = self.alive
        new.tids = list(self.tids)
        return new

    def heap_snapshot(self) -> dict:
        names = self.program.object_names
        return {names[i]: (None if self.freed[i] else self.values[i]) for i in range(1, len(self.values))}


class StepResult:
    """Outcome of one :meth:`VmState.step` call.

    ``executed`` is false only for a blocked attempt that consumed no event
    (contended acquire, join on a live thread); such attempts are retried
    when the task is next dispatched.
    """

    __slots__ = ("status", "event", "pc", "executed", "val", "tgt", "fault", "detail", "woken", "reason")

    def __init__(self, status, event, pc, executed=True, val=None, tgt=None,
                 fault=None, detail="", woken=(), reason=None):
        self.status = status
        self.event = event
        self.pc = pc
        self.executed = executed
        self.val = val
        self.tgt = tgt
        self.fault = fault
        self.detail = detail
        self.woken = woken
        self.reason = reason

    def __repr__(self) -> str:
        return f"StepResult({self.status}, {self.event}, fault={self.fault})"


class VmState:
    def __init__(self, programs):
        if isinstance(programs, Program):
            programs = [programs]
        self.instances: list = []
        self.tasks: dict = {}
        self.steps = 0
        self.coverage: set = set()
        base = 0
        for g, program in enumerate(programs):
            inst = Instance(program, g, base)
            self.instances.append(inst)
            self._create_task(inst, program.entry)
            base += len(program.threads)

    # -- task management ---------------------------------------------------

    def _create_task(self, inst: Instance, thread: str) -> TaskContext:
        index = inst.program.thread_index[thread]
        code = inst.program.code[index]
        ctx = TaskContext(inst.base + index, thread, inst.subset, code, pc=code.next_pc(0))
        self.tasks[ctx.tid] = ctx
        inst.spawned.add(thread)
        inst.alive += 1
        inst.tids.append(ctx.tid)
        return ctx

    def clone(self) -> "VmState":
        new = VmState.__new__(VmState)
        new.instances = [inst.copy() for inst in self.instances]
        new.tasks = {}
        for tid, c in self.tasks.items():
            new.tasks[tid] = TaskContext(
                c.tid, c.thread, c.subset, c.code, c.pc, dict(c.regs), c.state, c.block,
                c.preempt_count, c.irq_depth, c.rcu_depth, c.non_block_count, c.weight,
                c.starvation_age, c.consecutive_silent_steps)
        new.steps = self.steps
        new.coverage = set(self.coverage)
        return new

    def enabled_set(self, subset: int = 0) -> list:
        tasks = self.tasks
        return [t for t in self.instances[subset].tids if tasks[t].enabled]

    def blocked_set(self, subset: int = 0) -> list:
        tasks = self.tasks
        return [t for t in self.instances[subset].tids if tasks[t].state is BLOCKED]

    def alive(self, subset: int = 0) -> int:
        return self.instances[subset].alive

    def next_event(self, tid: int) -> m.Event:
        return self.tasks[tid].next_event()

    def thread_name(self, tid: int) -> str:
        return self.tasks[tid].thread

    def state_key(self) -> tuple:
        """Hashable snapshot of all semantically relevant state."""
        insts = tuple(
            (tuple(i.values), tuple(i.freed),
             tuple((k, l.holder, tuple(sorted(l.readers.items())), tuple(sorted(l.waiters)))
                   for k, l in i.locks.items()),
             tuple(sorted((k, tuple(v)) for k, v in i.barriers.items())),
             tuple(sorted(i.spawned)))
            for i in self.instances
        )
        tasks = tuple(
            (t, c.pc, c.state, c.block, tuple(sorted(c.regs.items())), c.preempt_count,
             c.irq_depth, c.rcu_depth, c.non_block_count)
            for t, c in sorted(self.tasks.items())
        )
        return insts, tasks

    def check_invariants(self) -> None:
        """Assert lock safety and counter non-negativity."""
        for inst in self.instances:
            for name, lock in inst.locks.items():
                if lock.holder is not None and lock.readers:
                    raise AssertionError(f"rwsem {name} held by writer and readers")
                if any(d <= 0 for d in lock.readers.values()):
                    raise AssertionError(f"lock {name} reader depth not positive")
        for ctx in self.tasks.values():
            if min(ctx.preempt_count, ctx.irq_depth, ctx.rcu_depth, ctx.non_block_count) < 0:
                raise AssertionError(f"negative counter on task {ctx.tid}")
            if ctx.enabled == (ctx.state in (BLOCKED, EXITED)):
                raise AssertionError("enabled flag out of sync with state")

    # -- evaluation --------------------------------------------------------

    @staticmethod
    def _eval(expr, regs) -> int:
        t = type(expr)
        if t is Const:
            return expr.value
        if t is Reg:
            return regs.get(expr.name, 0)
        lhs = regs.get(expr.reg, 0)
        rhs = expr.rhs.value
        op = expr.op
        if op == "+":
            return wrap64(lhs + rhs)
        if op == "==":
            return int(lhs == rhs)
        if op == "!=":
            return int(lhs != rhs)
        return int(lhs < rhs)

    # -- stepping ----------------------------------------------------------

    def step(self, tid: int) -> StepResult:
        """Execute (or attempt) the next event of task ``tid``."""
        ctx = self.tasks[tid]
        if not ctx.enabled:
            raise RuntimeError(f"task {tid} is not enabled")
        inst = self.instances[ctx.subset]
        pc = ctx.pc
        ev = ctx.next_event()
        self.steps += 1
        res = _HANDLERS[ev.kind](self, ctx, inst, ev, pc)
        if res.executed and res.status is not FAULT:
            if ev.kind in _NOISY:
                ctx.consecutive_silent_steps = 0
            else:
                ctx.consecutive_silent_steps += 1
        return res

    def _advance(self, ctx: TaskContext, to: int | None = None) -> None:
        ctx.pc = ctx.code.next_pc(ctx.pc + 1 if to is None else to)

    def _fault(self, ctx, ev, pc, kind, detail, tgt=None) -> StepResult:
        return StepResult(FAULT, ev, pc, True, None, tgt, kind, detail)

    def _obj(self, inst: Instance, name: str) -> int:
        return inst.program.object_ids[name]

    def _wake(self, tids) -> tuple:
        woken = []
        for w in sorted(tids):
            c = self.tasks[w]
            if c.state is BLOCKED:
                c.state = ENQUEUED
                c.block = None
                woken.append(w)
        return tuple(woken)

    def _load(self, ctx, inst, ev, pc):
        i = self._obj(inst, ev.target)
        if inst.freed[i]:
            return self._fault(ctx, ev, pc, UAF, f"load of freed object {ev.target}", ev.target)
        v = inst.values[i]
        ctx.regs[ev.arg] = v
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc, val=v)

    def _store(self, ctx, inst, ev, pc):
        i = self._obj(inst, ev.target)
        if inst.freed[i]:
            return self._fault(ctx, ev, pc, UAF, f"store to freed object {ev.target}", ev.target)
        v = wrap64(self._eval(ev.arg, ctx.regs))
        inst.values[i] = v
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc, val=v)

    def _deref(self, ctx, inst, ev, pc):
        i = self._obj(inst, ev.target)
        if inst.freed[i]:
            return self._fault(ctx, ev, pc, UAF, f"deref of freed pointer cell {ev.target}", ev.target)
        ptr = inst.values[i]
        if ptr == 0:
            return self._fault(ctx, ev, pc, NULL_DEREF, f"{ev.target} is null", ev.target)
        names = inst.program.object_names
        if not 0 < ptr < len(names):
            return self._fault(ctx, ev, pc, MODEL_ERROR, f"{ev.target} holds wild pointer {ptr}")
        if inst.freed[ptr]:
            return self._fault(ctx, ev, pc, UAF, f"{ev.target} points to freed {names[ptr]}", names[ptr])
        v = inst.values[ptr]
        ctx.regs[ev.arg] = v
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc, val=v, tgt=names[ptr])

    def _alloc(self, ctx, inst, ev, pc):
        i = self._obj(inst, ev.target)
        if inst.freed[i]:
            return self._fault(ctx, ev, pc, MODEL_ERROR, f"alloc of freed object {ev.target} (ids are not reused)")
        inst.values[i] = 0
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc, val=0)

    def _free(self, ctx, inst, ev, pc):
        i = self._obj(inst, ev.target)
        if inst.freed[i]:
            return self._fault(ctx, ev, pc, DOUBLE_FREE, f"double free of {ev.target}", ev.target)
        inst.freed[i] = True
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc)

    def _acquire(self, ctx, inst, ev, pc):
        lock = inst.locks[ev.target]
        tid = ctx.tid
        if lock.kind == "rcu":
            ctx.rcu_depth += 1
        elif lock.kind == "rwsem" and ev.arg == "read":
            if lock.holder is not None:
                return self._block(ctx, lock, ev, pc, ("lock", ev.target))
            lock.readers[tid] = lock.readers.get(tid, 0) + 1
        else:
            if lock.holder is not None or lock.readers:
                reason = ("spinwait", ev.target) if lock.kind == "spin" else ("lock", ev.target)
                return self._block(ctx, lock, ev, pc, reason)
            lock.holder = tid
            if lock.kind == "spin":
                ctx.preempt_count += 1
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc)

    def _block(self, ctx, lock, ev, pc, reason):
        ctx.state = BLOCKED
        ctx.block = reason
        lock.waiters.add(ctx.tid)
        return StepResult(NOW_BLOCKED, ev, pc, executed=False, reason=reason)

    def _release(self, ctx, inst, ev, pc):
        lock = inst.locks[ev.target]
        tid = ctx.tid
        if lock.kind == "rcu":
            if ctx.rcu_depth == 0:
                return self._fault(ctx, ev, pc, MODEL_ERROR, f"UnmatchedDecrement: rcu release of {ev.target}")
            ctx.rcu_depth -= 1
        elif lock.holder == tid:
            if lock.kind == "spin":
                if ctx.preempt_count == 0:
                    return self._fault(ctx, ev, pc, MODEL_ERROR, "UnmatchedDecrement: preempt_count")
                ctx.preempt_count -= 1
            lock.holder = None
        elif tid in lock.readers:
            depth = lock.readers[tid] - 1
            if depth:
                lock.readers[tid] = depth
            else:
                del lock.readers[tid]
        else:
            return self._fault(ctx, ev, pc, MODEL_ERROR, f"ReleaseNotHeld: {ev.target}")
        woken = self._wake(lock.waiters)
        lock.waiters.clear()
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc, woken=woken)

    def _counter(self, ctx, inst, ev, pc):
        k = ev.kind
        if k == m.RCU_LOCK:
            ctx.rcu_depth += 1
        elif k == m.IRQ_DISABLE:
            ctx.irq_depth += 1
        elif k == m.PREEMPT_DISABLE:
            ctx.preempt_count += 1
        elif k == m.NONBLOCK_ENTER:
            ctx.non_block_count += 1
        else:
            attr = {m.RCU_UNLOCK: "rcu_depth", m.IRQ_ENABLE: "irq_depth",
                    m.PREEMPT_ENABLE: "preempt_count", m.NONBLOCK_EXIT: "non_block_count"}[k]
            value = getattr(ctx, attr)
            if value == 0:
                return self._fault(ctx, ev, pc, MODEL_ERROR, f"UnmatchedDecrement: {attr}")
            setattr(ctx, attr, value - 1)
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc)

    def _spawn(self, ctx, inst, ev, pc):
        if ev.target in inst.spawned:
            return self._fault(ctx, ev, pc, MODEL_ERROR, f"thread {ev.target} spawned twice")
        if ev.target not in inst.program.thread_index:
            return self._fault(ctx, ev, pc, MODEL_ERROR, f"JoinUnknownThread: spawn of {ev.target}")
        self._create_task(inst, ev.target)
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc)

    def _join(self, ctx, inst, ev, pc):
        index = inst.program.thread_index.get(ev.target)
        if index is None:
            return self._fault(ctx, ev, pc, MODEL_ERROR, f"JoinUnknownThread: {ev.target}")
        target = self.tasks.get(inst.base + index)
        if target is not None and target.state is EXITED:
            self._advance(ctx)
            return StepResult(PROGRESSED, ev, pc)
        inst.joiners.setdefault(ev.target, set()).add(ctx.tid)
        ctx.state = BLOCKED
        ctx.block = ("join", ev.target)
        return StepResult(NOW_BLOCKED, ev, pc, executed=False, reason=ctx.block)

    def _barrier(self, ctx, inst, ev, pc):
        arrived = inst.barriers.setdefault(ev.target, [])
        arrived.append(ctx.tid)
        self._advance(ctx)
        if len(arrived) >= ev.arg:
            woken = self._wake(arrived)
            inst.barriers[ev.target] = []
            return StepResult(PROGRESSED, ev, pc, val=ev.arg, woken=woken)
        ctx.state = BLOCKED
        ctx.block = ("barrier", ev.target)
        return StepResult(NOW_BLOCKED, ev, pc, executed=True, val=ev.arg, reason=ctx.block)

    def _plain(self, ctx, inst, ev, pc):
        self._advance(ctx)
        val = ev.arg.value if ev.kind == m.COMPUTE else None
        return StepResult(PROGRESSED, ev, pc, val=val)

    def _br(self, ctx, inst, ev, pc):
        taken = self._eval(ev.arg, ctx.regs) != 0
        if ev.origin is not None:
            self.coverage.add((ev.origin[0], ev.origin[1], taken))
        if taken:
            self._advance(ctx, ctx.code.labels[ev.target])
        else:
            self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc, val=int(taken))

    def _goto(self, ctx, inst, ev, pc):
        self._advance(ctx, ctx.code.labels[ev.target])
        return StepResult(PROGRESSED, ev, pc)

    def _assert(self, ctx, inst, ev, pc):
        v = self._eval(ev.arg, ctx.regs)
        if v == 0:
            return self._fault(ctx, ev, pc, ASSERTION_FAILURE, f"assert {ev.arg} failed")
        self._advance(ctx)
        return StepResult(PROGRESSED, ev, pc, val=v)

    def _exit(self, ctx, inst, ev, pc):
        if not ctx.preemptible():
            return self._fault(
                ctx, ev, pc, MODEL_ERROR,
                f"thread {ctx.thread} exits with unbalanced counters "
                f"(preempt={ctx.preempt_count} irq={ctx.irq_depth} rcu={ctx.rcu_depth} "
                f"nonblock={ctx.non_block_count})")
        ctx.state = EXITED
        ctx.block = None
        inst.alive -= 1
        woken = self._wake(inst.joiners.pop(ctx.thread, ()))
        return StepResult(TASK_EXITED, ev, pc, woken=woken)


_HANDLERS = {
    m.LOAD: VmState._load,
    m.STORE: VmState._store,
    m.DEREF: VmState._deref,
    m.ALLOC: VmState._alloc,
    m.FREE: VmState._free,
    m.ACQUIRE: VmState._acquire,
    m.RELEASE: VmState._release,
    m.SPAWN: VmState._spawn,
    m.JOIN: VmState._join,
    m.BARRIER: VmState._barrier,
    m.YIELD: VmState._plain,
    m.COMPUTE: VmState._plain,
    m.BR: VmState._br,
    m.GOTO: VmState._goto,
    m.ASSERT: VmState._assert,
    m.EXIT: VmState._exit,
}
for _k in m.COUNTER_EVENTS:
    _HANDLERS[_k] = VmState._counter


def enabled_set(vm: VmState, subset: int = 0) -> set:
    return set(vm.enabled_set(subset))
