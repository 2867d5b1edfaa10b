"""Program DSL: threads of events over named objects and locks.

Two text formats share one line-oriented grammar (see ``docs/dsl.md``):

* ``.ccp`` program files: ``object``/``lock``/``entry`` declarations and
  ``thread NAME:`` blocks, one event per line.
* ``.cct`` target specs: the same declarations plus an optional ``init:``
  block and ``proc NAME(param: lo..hi, ...):`` templates.

Call sequences (``.cseq``) list one ``proc(args)`` per line, optionally
suffixed with ``async``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Union

# Event kinds.
LOAD = "load"
STORE = "store"
DEREF = "deref"
ALLOC = "alloc"
FREE = "free"
ACQUIRE = "acquire"
RELEASE = "release"
RCU_LOCK = "rcu_lock"
RCU_UNLOCK = "rcu_unlock"
IRQ_DISABLE = "irq_disable"
IRQ_ENABLE = "irq_enable"
PREEMPT_DISABLE = "preempt_disable"
PREEMPT_ENABLE = "preempt_enable"
NONBLOCK_ENTER = "nonblock_enter"
NONBLOCK_EXIT = "nonblock_exit"
SPAWN = "spawn"
JOIN = "join"
BARRIER = "barrier"
YIELD = "yield"
COMPUTE = "compute"
BR = "br"
GOTO = "goto"
LABEL = "label"
ASSERT = "assert"
EXIT = "exit"

COUNTER_EVENTS = frozenset(
    {RCU_LOCK, RCU_UNLOCK, IRQ_DISABLE, IRQ_ENABLE, PREEMPT_DISABLE,
     PREEMPT_ENABLE, NONBLOCK_ENTER, NONBLOCK_EXIT}
)
MEMORY_EVENTS = frozenset({LOAD, STORE, DEREF, ALLOC, FREE})
LOCK_KINDS = ("mutex", "spin", "rwsem", "rcu")
ACQUIRE_MODES = ("excl", "read", "write")
BINOPS = ("+", "==", "!=", "<")

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_INT = re.compile(r"-?[0-9]+\Z")
_PROC_HEAD = re.compile(r"proc\s+([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*:\s*\Z")
_PARAM = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(-?[0-9]+)\s*\.\.\s*(-?[0-9]+)\s*\Z")
_CALL = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*(async)?\s*\Z")

ENTRY_THREAD = "main"
ASYNC_BARRIER = "b0"


class DslError(Exception):
    """Base class for DSL diagnostics; carries a 1-based line/column."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        where = f"{line}:{col}: " if line else ""
        super().__init__(f"{where}{message}")


class DslSyntaxError(DslError):
    pass


class UnknownName(DslError):
    def __init__(self, name: str, line: int = 0, col: int = 0, what: str = "name"):
        self.name = name
        super().__init__(f"unknown {what} {name!r}", line, col)


class DuplicateName(DslError):
    def __init__(self, name: str, line: int = 0, col: int = 0):
        self.name = name
        super().__init__(f"duplicate name {name!r}", line, col)


class EmptyRange(DslError):
    pass


class RangeViolation(DslError):
    pass


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Const:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True, slots=True)
class Param:
    """Template parameter in an integer-constant position."""

    name: str

    def __str__(self) -> str:
        return f"${self.name}"


@dataclass(frozen=True, slots=True)
class Reg:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, slots=True)
class BinOp:
    reg: str
    op: str
    rhs: Union[Const, Param]

    def __str__(self) -> str:
        return f"{self.reg} {self.op} {self.rhs}"


Expr = Union[Const, Param, Reg, BinOp]


@dataclass(frozen=True, slots=True)
class Event:
    """One executable step of a thread.

    ``target`` names the object, lock, thread, label or barrier the event
    refers to; ``arg`` holds the register name (load/deref), expression
    (store/br/assert), acquire mode, barrier count or compute units.
    ``origin`` tags events instantiated from a procedure template as
    ``(proc, template index)`` and is ignored by equality.
    """

    kind: str
    target: str | None = None
    arg: object = None
    origin: tuple | None = field(default=None, compare=False)

    def __str__(self) -> str:
        return render_event(self)


EXIT_EVENT = Event(EXIT)


# --------------------------------------------------------------------------
# Programs and targets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ThreadCode:
    events: tuple
    labels: dict
    skip: tuple  # skip[pc] = first non-label index >= pc

    def next_pc(self, pc: int) -> int:
        return self.skip[pc] if pc < len(self.skip) else pc


@dataclass(frozen=True)
class Program:
    objects: tuple  # ((name, initial value), ...)
    locks: tuple  # ((name, kind), ...)
    threads: tuple  # ((name, (Event, ...)), ...)
    entry: str

    @cached_property
    def object_ids(self) -> dict:
        return {name: i + 1 for i, (name, _) in enumerate(self.objects)}

    @cached_property
    def object_names(self) -> tuple:
        return ("null",) + tuple(name for name, _ in self.objects)

    @cached_property
    def lock_kinds(self) -> dict:
        return dict(self.locks)

    @cached_property
    def thread_index(self) -> dict:
        return {name: i for i, (name, _) in enumerate(self.threads)}

    @cached_property
    def code(self) -> tuple:
        """Per-thread compiled code (label table and label-skipping map)."""
        out = []
        for _, events in self.threads:
            n = len(events)
            skip = [n] * (n + 1)
            for i in range(n - 1, -1, -1):
                skip[i] = skip[i + 1] if events[i].kind == LABEL else i
            labels = {ev.target: skip[i] for i, ev in enumerate(events) if ev.kind == LABEL}
            out.append(ThreadCode(events, labels, tuple(skip)))
        return tuple(out)

    def thread_events(self, name: str) -> tuple:
        return self.threads[self.thread_index[name]][1]


@dataclass(frozen=True)
class Procedure:
    name: str
    params: tuple  # ((name, lo, hi), ...)
    body: tuple


@dataclass(frozen=True)
class TargetSpec:
    name: str
    objects: tuple
    locks: tuple
    init: tuple
    procedures: tuple

    @cached_property
    def procs(self) -> dict:
        return {p.name: p for p in self.procedures}


@dataclass(frozen=True)
class Call:
    proc: str
    args: tuple = ()
    is_async: bool = False

    def __str__(self) -> str:
        text = f"{self.proc}({', '.join(str(a) for a in self.args)})"
        return text + " async" if self.is_async else text


@dataclass(frozen=True)
class CallSequence:
    calls: tuple = ()

    def __len__(self) -> int:
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls)

    def __getitem__(self, i):
        return self.calls[i]

    @property
    def async_flags(self) -> tuple:
        return tuple(c.is_async for c in self.calls)


# --------------------------------------------------------------------------
# Lexing helpers
# --------------------------------------------------------------------------


def _strip(line: str) -> str:
    i = line.find("#")
    return (line if i < 0 else line[:i]).rstrip()


def _col(raw: str, token: str) -> int:
    i = raw.find(token)
    return i + 1 if i >= 0 else 1


def _ident(tok: str, raw: str, lineno: int, what: str = "name") -> str:
    if not _IDENT.match(tok):
        raise DslSyntaxError(f"expected {what}, got {tok!r}", lineno, _col(raw, tok))
    return tok


class _Ctx:
    """Per-line parse context for expression and event parsing."""

    def __init__(self, raw: str, lineno: int, objects: dict, params: set | None):
        self.raw = raw
        self.lineno = lineno
        self.objects = objects
        self.params = params

    def err(self, msg: str, tok: str = "") -> DslSyntaxError:
        return DslSyntaxError(msg, self.lineno, _col(self.raw, tok) if tok else 1)

    def const(self, tok: str) -> Const | Param:
        if _INT.match(tok):
            return Const(int(tok))
        if tok.startswith("&"):
            name = tok[1:]
            if name not in self.objects:
                raise UnknownName(name, self.lineno, _col(self.raw, tok), "object")
            return Const(self.objects[name])
        if tok.startswith("$"):
            name = tok[1:]
            if self.params is None:
                raise self.err("parameters are only allowed in procedure templates", tok)
            if name not in self.params:
                raise UnknownName(name, self.lineno, _col(self.raw, tok), "parameter")
            return Param(name)
        raise self.err(f"expected integer constant, got {tok!r}", tok)

    def expr(self, toks: list) -> Expr:
        if len(toks) == 1:
            tok = toks[0]
            if _IDENT.match(tok):
                return Reg(tok)
            return self.const(tok)
        if len(toks) == 3:
            reg, op, rhs = toks
            if not _IDENT.match(reg):
                raise self.err(f"expected register, got {reg!r}", reg)
            if op not in BINOPS:
                raise self.err(f"unknown operator {op!r}", op)
            return BinOp(reg, op, self.const(rhs))
        raise self.err("malformed expression", toks[0] if toks else "")


_NULLARY = {
    RCU_LOCK, RCU_UNLOCK, IRQ_DISABLE, IRQ_ENABLE, PREEMPT_DISABLE,
    PREEMPT_ENABLE, NONBLOCK_ENTER, NONBLOCK_EXIT, YIELD, EXIT,
}


def _parse_event(ctx: _Ctx, toks: list) -> Event:
    kind = toks[0]
    rest = toks[1:]

    def need(n: int):
        if len(rest) != n:
            raise ctx.err(f"{kind} takes {n} operand(s)", kind)

    if kind in _NULLARY:
        need(0)
        return Event(kind)
    if kind in (LOAD, DEREF):
        need(2)
        return Event(kind, rest[0], _ident(rest[1], ctx.raw, ctx.lineno, "register"))
    if kind == STORE:
        if len(rest) < 2:
            raise ctx.err("store takes an object and a value", kind)
        return Event(kind, rest[0], ctx.expr(rest[1:]))
    if kind in (ALLOC, FREE, RELEASE, SPAWN, JOIN, GOTO, LABEL):
        need(1)
        return Event(kind, _ident(rest[0], ctx.raw, ctx.lineno))
    if kind == ACQUIRE:
        if len(rest) not in (1, 2):
            raise ctx.err("acquire takes a lock and an optional mode", kind)
        mode = rest[1] if len(rest) == 2 else None
        if mode is not None and mode not in ACQUIRE_MODES:
            raise ctx.err(f"unknown acquire mode {mode!r}", mode)
        return Event(kind, rest[0], mode)
    if kind == BARRIER:
        need(2)
        if not _INT.match(rest[1]) or int(rest[1]) < 1:
            raise ctx.err("barrier count must be a positive integer", rest[1])
        return Event(kind, _ident(rest[0], ctx.raw, ctx.lineno), int(rest[1]))
    if kind == COMPUTE:
        need(1)
        units = ctx.const(rest[0])
        if isinstance(units, Const) and units.value < 1:
            raise ctx.err("compute units must be positive", rest[0])
        return Event(kind, None, units)
    if kind == BR:
        if len(rest) < 2:
            raise ctx.err("br takes a condition and a label", kind)
        return Event(kind, _ident(rest[-1], ctx.raw, ctx.lineno, "label"), ctx.expr(rest[:-1]))
    if kind == ASSERT:
        if not rest:
            raise ctx.err("assert takes a condition", kind)
        return Event(kind, None, ctx.expr(rest))
    raise ctx.err(f"unknown event {kind!r}", kind)


class _Decls:
    """Shared object/lock declaration handling for programs and targets."""

    def __init__(self):
        self.objects: list = []  # [name, raw init token, lineno, raw]
        self.locks: list = []
        self.names: dict = {}

    def declare(self, name: str, lineno: int, raw: str):
        if name in self.names:
            raise DuplicateName(name, lineno, _col(raw, name))
        self.names[name] = lineno

    def handle(self, toks: list, lineno: int, raw: str) -> bool:
        if toks[0] == "object":
            if len(toks) != 3:
                raise DslSyntaxError("object takes a name and an initial value", lineno, 1)
            name = _ident(toks[1], raw, lineno)
            self.declare(name, lineno, raw)
            self.objects.append((name, toks[2], lineno, raw))
            return True
        if toks[0] == "lock":
            if len(toks) != 3:
                raise DslSyntaxError("lock takes a name and a kind", lineno, 1)
            name = _ident(toks[1], raw, lineno)
            if toks[2] not in LOCK_KINDS:
                raise DslSyntaxError(f"unknown lock kind {toks[2]!r}", lineno, _col(raw, toks[2]))
            self.declare(name, lineno, raw)
            self.locks.append((name, toks[2]))
            return True
        return False

    def object_ids(self) -> dict:
        return {name: i + 1 for i, (name, *_rest) in enumerate(self.objects)}

    def resolve_objects(self) -> tuple:
        ids = self.object_ids()
        out = []
        for name, tok, lineno, raw in self.objects:
            ctx = _Ctx(raw, lineno, ids, None)
            out.append((name, ctx.const(tok).value))
        return tuple(out)


def _validate_events(events, lineno_of, objects, locks, threads, where: str, params=None):
    """Check name references and label targets inside one event list."""
    labels = set()
    for i, ev in enumerate(events):
        if ev.kind == LABEL:
            if ev.target in labels:
                raise DuplicateName(ev.target, lineno_of[i], 1)
            labels.add(ev.target)
    for i, ev in enumerate(events):
        line = lineno_of[i]
        k = ev.kind
        if k in MEMORY_EVENTS and ev.target not in objects:
            raise UnknownName(ev.target, line, 1, "object")
        if k in (ACQUIRE, RELEASE):
            if ev.target not in locks:
                raise UnknownName(ev.target, line, 1, "lock")
            if k == ACQUIRE and ev.arg is not None:
                is_rw = locks[ev.target] == "rwsem"
                if (ev.arg == "excl") == is_rw:
                    raise DslSyntaxError(
                        f"mode {ev.arg!r} not valid for {locks[ev.target]} lock {ev.target!r}", line, 1)
        if k in (SPAWN, JOIN) and threads is not None and ev.target not in threads:
            raise UnknownName(ev.target, line, 1, "thread")
        if k in (BR, GOTO) and ev.target not in labels:
            raise UnknownName(ev.target, line, 1, f"label in {where}")


def _normalize_modes(events, locks) -> tuple:
    out = []
    for ev in events:
        if ev.kind == ACQUIRE and ev.arg is None:
            ev = replace(ev, arg="write" if locks[ev.target] == "rwsem" else "excl")
        out.append(ev)
    return tuple(out)


def _lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if line.strip():
            yield lineno, raw, line


def parse_program(text: str) -> Program:
    """Parse ``.ccp`` source into a validated :class:`Program`."""
    decls = _Decls()
    threads: list = []  # [name, [(toks, lineno, raw)]]
    entry = None
    current = None
    for lineno, raw, line in _lines(text):
        toks = line.split()
        if decls.handle(toks, lineno, raw):
            current = None
            continue
        if toks[0] == "thread":
            if len(toks) != 2 or not toks[1].endswith(":"):
                raise DslSyntaxError("expected 'thread NAME:'", lineno, 1)
            name = _ident(toks[1][:-1], raw, lineno)
            decls.declare(name, lineno, raw)
            current = [name, []]
            threads.append(current)
            continue
        if toks[0] == "entry":
            if len(toks) != 2:
                raise DslSyntaxError("expected 'entry NAME'", lineno, 1)
            if entry is not None:
                raise DuplicateName("entry", lineno, 1)
            entry = (toks[1], lineno, raw)
            continue
        if current is None:
            raise DslSyntaxError(f"event {toks[0]!r} outside a thread block", lineno, 1)
        current[1].append((toks, lineno, raw))

    objects = decls.resolve_objects()
    ids = decls.object_ids()
    locks = dict(decls.locks)
    thread_names = {name for name, _ in threads}
    built = []
    for name, body in threads:
        events = tuple(_parse_event(_Ctx(raw, ln, ids, None), toks) for toks, ln, raw in body)
        _validate_events(events, [ln for _, ln, _ in body], ids, locks, thread_names, f"thread {name}")
        built.append((name, _normalize_modes(events, locks)))
    if not built:
        raise DslSyntaxError("program declares no threads", 0, 0)
    if entry is None:
        entry_name = ENTRY_THREAD if ENTRY_THREAD in thread_names else built[0][0]
    else:
        entry_name, ln, raw = entry
        if entry_name not in thread_names:
            raise UnknownName(entry_name, ln, _col(raw, entry_name), "thread")
    return Program(objects, tuple(decls.locks), tuple(built), entry_name)


def parse_target_spec(text: str) -> TargetSpec:
    """Parse ``.cct`` source into a validated :class:`TargetSpec`."""
    decls = _Decls()
    name = "target"
    blocks: list = []  # [kind, name, params, [(toks, lineno, raw)], lineno]
    current = None
    for lineno, raw, line in _lines(text):
        toks = line.split()
        if decls.handle(toks, lineno, raw):
            current = None
            continue
        if toks[0] == "target":
            if len(toks) != 2:
                raise DslSyntaxError("expected 'target NAME'", lineno, 1)
            name = _ident(toks[1], raw, lineno)
            continue
        if toks[0] == "init:" and len(toks) == 1:
            if any(b[0] == "init" for b in blocks):
                raise DuplicateName("init", lineno, 1)
            current = ["init", None, (), [], lineno]
            blocks.append(current)
            continue
        if toks[0] == "proc":
            m = _PROC_HEAD.match(line.strip())
            if not m:
                raise DslSyntaxError("expected 'proc NAME(param: lo..hi, ...):'", lineno, 1)
            pname = m.group(1)
            if any(b[0] == "proc" and b[1] == pname for b in blocks):
                raise DuplicateName(pname, lineno, _col(raw, pname))
            params = []
            if m.group(2).strip():
                for chunk in m.group(2).split(","):
                    pm = _PARAM.match(chunk)
                    if not pm:
                        raise DslSyntaxError(f"malformed parameter {chunk.strip()!r}", lineno, _col(raw, chunk.strip()))
                    lo, hi = int(pm.group(2)), int(pm.group(3))
                    if lo > hi:
                        raise EmptyRange(f"empty range {lo}..{hi} for {pm.group(1)!r}", lineno, _col(raw, pm.group(1)))
                    if any(p[0] == pm.group(1) for p in params):
                        raise DuplicateName(pm.group(1), lineno, _col(raw, pm.group(1)))
                    params.append((pm.group(1), lo, hi))
            current = ["proc", pname, tuple(params), [], lineno]
            blocks.append(current)
            continue
        if current is None:
            raise DslSyntaxError(f"event {toks[0]!r} outside an init/proc block", lineno, 1)
        current[3].append((toks, lineno, raw))

    objects = decls.resolve_objects()
    ids = decls.object_ids()
    locks = dict(decls.locks)
    init: tuple = ()
    procs = []
    for kind, pname, params, body, _ in blocks:
        pset = {p[0] for p in params} if kind == "proc" else None
        events = tuple(_parse_event(_Ctx(raw, ln, ids, pset), toks) for toks, ln, raw in body)
        for ev in events:
            if ev.kind in (SPAWN, JOIN, EXIT, BARRIER):
                raise DslSyntaxError(f"{ev.kind} is not allowed in templates", body[0][1], 1)
        _validate_events(events, [ln for _, ln, _ in body], ids, locks, None, pname or "init", pset)
        events = _normalize_modes(events, locks)
        if kind == "init":
            init = events
        else:
            procs.append(Procedure(pname, params, events))
    return TargetSpec(name, objects, tuple(decls.locks), init, tuple(procs))


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def render_event(ev: Event) -> str:
    k = ev.kind
    if k in _NULLARY:
        return k
    if k in (LOAD, DEREF):
        return f"{k} {ev.target} {ev.arg}"
    if k == STORE:
        return f"{k} {ev.target} {ev.arg}"
    if k == ACQUIRE:
        return f"{k} {ev.target} {ev.arg}" if ev.arg else f"{k} {ev.target}"
    if k == BARRIER:
        return f"{k} {ev.target} {ev.arg}"
    if k == COMPUTE:
        return f"{k} {ev.arg}"
    if k == BR:
        return f"{k} {ev.arg} {ev.target}"
    if k == ASSERT:
        return f"{k} {ev.arg}"
    return f"{k} {ev.target}"


def _render_decls(objects, locks) -> list:
    lines = [f"object {name} {value}" for name, value in objects]
    lines += [f"lock {name} {kind}" for name, kind in locks]
    return lines


def render_program(program: Program) -> str:
    lines = _render_decls(program.objects, program.locks)
    lines.append(f"entry {program.entry}")
    for name, events in program.threads:
        lines.append(f"thread {name}:")
        lines += [f"  {render_event(ev)}" for ev in events]
    return "\n".join(lines) + "\n"


def render_target_spec(spec: TargetSpec) -> str:
    lines = [f"target {spec.name}"] + _render_decls(spec.objects, spec.locks)
    if spec.init:
        lines.append("init:")
        lines += [f"  {render_event(ev)}" for ev in spec.init]
    for proc in spec.procedures:
        params = ", ".join(f"{n}: {lo}..{hi}" for n, lo, hi in proc.params)
        lines.append(f"proc {proc.name}({params}):")
        lines += [f"  {render_event(ev)}" for ev in proc.body]
    return "\n".join(lines) + "\n"


def render_call_sequence(seq: CallSequence) -> str:
    return "".join(f"{call}\n" for call in seq.calls)


def parse_call_sequence(text: str) -> CallSequence:
    calls = []
    for lineno, raw, line in _lines(text):
        m = _CALL.match(line.strip())
        if not m:
            raise DslSyntaxError("expected 'proc(args) [async]'", lineno, 1)
        args = []
        if m.group(2).strip():
            for tok in m.group(2).split(","):
                tok = tok.strip()
                if not _INT.match(tok):
                    raise DslSyntaxError(f"expected integer argument, got {tok!r}", lineno, _col(raw, tok))
                args.append(int(tok))
        calls.append(Call(m.group(1), tuple(args), m.group(3) is not None))
    return CallSequence(tuple(calls))


# --------------------------------------------------------------------------
# Instantiation
# --------------------------------------------------------------------------


def check_call(spec: TargetSpec, call: Call) -> None:
    proc = spec.procs.get(call.proc)
    if proc is None:
        raise UnknownName(call.proc, what="procedure")
    if len(call.args) != len(proc.params):
        raise RangeViolation(f"{call.proc} takes {len(proc.params)} argument(s), got {len(call.args)}")
    for value, (pname, lo, hi) in zip(call.args, proc.params):
        if not lo <= value <= hi:
            raise RangeViolation(f"{call.proc}: {pname}={value} outside {lo}..{hi}")


def _subst_const(c, env):
    return Const(env[c.name]) if isinstance(c, Param) else c


def _subst(ev: Event, env: dict, prefix: str, origin) -> Event:
    arg = ev.arg
    if isinstance(arg, Param):
        arg = Const(env[arg.name])
    elif isinstance(arg, BinOp) and isinstance(arg.rhs, Param):
        arg = BinOp(arg.reg, arg.op, Const(env[arg.rhs.name]))
    if ev.kind == COMPUTE:
        arg = _subst_const(arg, env)
    target = ev.target
    if ev.kind in (LABEL, BR, GOTO):
        target = f"{prefix}{target}"
    return Event(ev.kind, target, arg, origin)


def _expand(proc: Procedure, args: tuple, prefix: str) -> list:
    env = {p[0]: v for p, v in zip(proc.params, args)}
    return [_subst(ev, env, prefix, (proc.name, i)) for i, ev in enumerate(proc.body)]


def instantiate_input(spec: TargetSpec, seq: CallSequence) -> Program:
    """Build the program that executes ``seq`` against ``spec``.

    Synchronous calls are inlined into the entry thread in order. Each
    async call gets its own thread, gated by a barrier sized to the number
    of async calls, spawned at the call's position and joined at the end.
    """
    for call in seq:
        check_call(spec, call)
    n_async = sum(1 for c in seq if c.is_async)
    entry = list(spec.init)
    workers = []
    for k, call in enumerate(seq):
        proc = spec.procs[call.proc]
        body = _expand(proc, call.args, f"c{k}_")
        if call.is_async:
            tname = f"async{len(workers)}_{call.proc}"
            workers.append((tname, tuple([Event(BARRIER, ASYNC_BARRIER, n_async)] + body + [EXIT_EVENT])))
            entry.append(Event(SPAWN, tname))
        else:
            entry.extend(body)
    entry.extend(Event(JOIN, tname) for tname, _ in workers)
    entry.append(EXIT_EVENT)
    threads = ((ENTRY_THREAD, tuple(entry)),) + tuple(workers)
    return Program(spec.objects, spec.locks, threads, ENTRY_THREAD)


def iter_events(program: Program) -> Iterable[Event]:
    for _, events in program.threads:
        yield from events
