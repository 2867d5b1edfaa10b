"""Two-phase fuzzing over target call sequences.

Phase 1 grows a corpus from sequential executions (voluntary scheduling
only, all calls synchronous) guided by branch coverage. Phase 2 draws
corpus seeds, duplicates up to N of their calls as async, barrier-gated
threads and runs the result under the configured scheduling strategy; the
oracles classify each run and every bug is stored with what is needed to
replay it.
"""

from __future__ import annotations

import json
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from cctsim import model as m
from cctsim.algos import StrategyConfig
from cctsim.model import Call, CallSequence, TargetSpec
from cctsim.scheduler import SchedParams, derive_seed, execute

PHASE_SEQ = 1
PHASE_CONC = 2
_MUTATIONS = ("insert", "remove", "arg")


# --------------------------------------------------------------------------
# Sequence generation and mutation
# --------------------------------------------------------------------------


def random_call(spec: TargetSpec, rng: random.Random) -> Call:
    proc = rng.choice(spec.procedures)
    return Call(proc.name, tuple(rng.randint(lo, hi) for _, lo, hi in proc.params))


def generate_seq(spec: TargetSpec, rng: random.Random, max_len: int) -> CallSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if not spec.procedures:
        raise ValueError(f"target {spec.name} declares no procedures")
    n = rng.randint(1, max_len)
    return CallSequence(tuple(random_call(spec, rng) for _ in range(n)))


def insert_call(seq: CallSequence, index: int, call: Call) -> CallSequence:
    calls = list(seq.calls)
    calls.insert(index, call)
    return CallSequence(tuple(calls))


def remove_call(seq: CallSequence, index: int) -> CallSequence:
    return CallSequence(seq.calls[:index] + seq.calls[index + 1:])


def _mutable_args(spec: TargetSpec, seq: CallSequence) -> list:
    """(call index, arg index) pairs whose range has more than one value."""
    out = []
    for i, call in enumerate(seq.calls):
        for j, (_, lo, hi) in enumerate(spec.procs[call.proc].params):
            if hi > lo:
                out.append((i, j))
    return out


def mutate_arg(spec: TargetSpec, seq: CallSequence, i: int, j: int, rng: random.Random) -> CallSequence:
    call = seq.calls[i]
    _, lo, hi = spec.procs[call.proc].params[j]
    choices = [x for x in range(lo, hi + 1) if x != call.args[j]] if hi - lo < 64 else None
    if choices is not None:
        value = rng.choice(choices)
    else:
        value = call.args[j]
        while value == call.args[j]:
            value = rng.randint(lo, hi)
    args = call.args[:j] + (value,) + call.args[j + 1:]
    calls = list(seq.calls)
    calls[i] = replace(call, args=args)
    return CallSequence(tuple(calls))


def mutate_seq(seq: CallSequence, spec: TargetSpec, rng: random.Random, op: str | None = None) -> CallSequence:
    """Apply one insert/remove/argument mutation.

    Removing from a length-1 sequence, or mutating arguments when none has
    a choice, falls back to the remaining operators; insertion always
    applies.
    """
    ops = [op] if op is not None else list(_MUTATIONS)
    rng.shuffle(ops)
    ops += [o for o in _MUTATIONS if o not in ops]
    for o in ops:
        if o == "remove" and len(seq) > 1:
            return remove_call(seq, rng.randrange(len(seq)))
        if o == "arg":
            slots = _mutable_args(spec, seq)
            if slots:
                i, j = rng.choice(slots)
                return mutate_arg(spec, seq, i, j, rng)
        if o == "insert":
            return insert_call(seq, rng.randint(0, len(seq)), random_call(spec, rng))
    raise AssertionError("insert always applies")


def concurrency_mutate(p: CallSequence, n: int, rng: random.Random) -> CallSequence:
    """Pick up to ``n`` calls of ``p`` and follow each with an async copy.

    Returns the empty sequence when nothing can be picked (empty ``p``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    picked = set(rng.sample(range(len(p)), min(n, len(p))))
    if not picked:
        return CallSequence()
    out = []
    for i, call in enumerate(p.calls):
        out.append(call)
        if i in picked:
            out.append(replace(call, is_async=True))
    return CallSequence(tuple(out))


def synchronous(seq: CallSequence) -> CallSequence:
    return CallSequence(tuple(replace(c, is_async=False) for c in seq.calls))


# --------------------------------------------------------------------------
# Coverage and corpus
# --------------------------------------------------------------------------


def run_coverage(vm_coverage, seq: CallSequence) -> frozenset:
    """Branch ids ``(proc, index, taken)`` plus ``("proc", name)`` ids."""
    return frozenset(vm_coverage) | frozenset(("proc", c.proc) for c in seq.calls)


def is_interesting(coverage, global_coverage) -> bool:
    return not set(coverage) <= set(global_coverage)


@dataclass(frozen=True)
class Seed:
    seed_id: int
    seq: CallSequence
    coverage: frozenset
    timestamp: float
    phase: int


def _cov_json(ids) -> list:
    return sorted([list(i) for i in ids], key=lambda x: [str(v) for v in x])


class Corpus:
    """Thread-safe seed store; the only state workers share."""

    def __init__(self):
        self._lock = threading.Lock()
        self._seeds: list = []
        self._coverage: set = set()

    def add_if_new(self, seq: CallSequence, coverage, phase: int) -> int:
        """Merge ``coverage``; store ``seq`` when it contributed. Returns the
        number of new ids."""
        with self._lock:
            new = set(coverage) - self._coverage
            if new:
                self._coverage |= new
                self._seeds.append(Seed(len(self._seeds), seq, frozenset(coverage), time.time(), phase))
            return len(new)

    def draw(self, rng: random.Random) -> Seed | None:
        with self._lock:
            return rng.choice(self._seeds) if self._seeds else None

    def coverage(self) -> frozenset:
        with self._lock:
            return frozenset(self._coverage)

    def seeds(self) -> list:
        with self._lock:
            return list(self._seeds)

    def __len__(self) -> int:
        with self._lock:
            return len(self._seeds)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for s in self.seeds():
            stem = d / f"seed_{s.seed_id:05d}"
            stem.with_suffix(".cseq").write_text(m.render_call_sequence(s.seq))
            meta = {"seed_id": s.seed_id, "phase": s.phase, "timestamp": s.timestamp,
                    "coverage": _cov_json(s.coverage)}
            stem.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_corpus(directory, spec: TargetSpec) -> list:
    """Re-read and validate persisted seeds."""
    out = []
    for path in sorted(Path(directory).glob("seed_*.cseq")):
        seq = m.parse_call_sequence(path.read_text())
        m.instantiate_input(spec, seq)
        meta = json.loads(path.with_suffix(".json").read_text())
        cov = frozenset(tuple(x) for x in meta["coverage"])
        out.append(Seed(meta["seed_id"], seq, cov, meta["timestamp"], meta["phase"]))
    return out


# --------------------------------------------------------------------------
# Campaign
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CampaignConfig:
    spec: TargetSpec
    phase1_budget: int = 100
    phase2_budget: int = 100
    par_calls: int = 2
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    params: SchedParams = field(default_factory=SchedParams)
    workers: int = 1
    out_dir: str | Path | None = None
    max_len: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.phase1_budget < 0 or self.phase2_budget < 0:
            raise ValueError("phase budgets must be >= 0")
        if self.par_calls < 1:
            raise ValueError("par_calls must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass(frozen=True)
class BugRecord:
    bug_id: int
    phase: int
    execution: int
    seq: CallSequence
    report: object  # oracles.BugReport
    trace: object  # scheduler.Trace
    run_seed: int


@dataclass
class CampaignReport:
    records: list = field(default_factory=list)
    bugs: list = field(default_factory=list)
    coverage_curve: list = field(default_factory=list)  # (executions, |coverage|)
    corpus: Corpus = field(default_factory=Corpus)

    @property
    def executions(self) -> int:
        return len(self.records)


_RETRIES = 8


class _Campaign:
    def __init__(self, cfg: CampaignConfig):
        self.cfg = cfg
        self.corpus = Corpus()
        self.lock = threading.Lock()
        self.results: list = []  # (phase, execution, record, bug-or-None, coverage size)
        self.seq_params = replace(cfg.params, sample_rate=0.0)

    def _execute(self, seq: CallSequence, strategy: StrategyConfig, params: SchedParams):
        program = m.instantiate_input(self.cfg.spec, seq)
        return execute(program, strategy, params)

    def one(self, phase: int, i: int) -> None:
        cfg = self.cfg
        rng = random.Random(derive_seed(cfg.seed, "fuzz", phase, i))
        run_seed = derive_seed(cfg.seed, "run", phase, i)
        record = {"phase": phase, "exec": i}
        bug = None
        try:
            if phase == PHASE_SEQ:
                parent = self.corpus.draw(rng) if rng.random() < 0.7 else None
                if parent is None:
                    seq = generate_seq(cfg.spec, rng, cfg.max_len)
                else:
                    seq = mutate_seq(synchronous(parent.seq), cfg.spec, rng)
                    record["parent"] = parent.seed_id
                strategy, params = StrategyConfig("rw"), replace(self.seq_params, rng_seed=run_seed)
            else:
                seq = CallSequence()
                for _ in range(_RETRIES):
                    parent = self.corpus.draw(rng)
                    base = generate_seq(cfg.spec, rng, cfg.max_len) if parent is None else synchronous(parent.seq)
                    seq = concurrency_mutate(base, cfg.par_calls, rng)
                    if len(seq):
                        if parent is not None:
                            record["parent"] = parent.seed_id
                        break
                strategy, params = cfg.strategy, replace(cfg.params, rng_seed=run_seed)
            ex = self._execute(seq, strategy, params)
            cov = run_coverage(ex.vm.coverage, seq)
            new = self.corpus.add_if_new(seq, cov, phase)
            record.update(outcome=ex.outcome.kind, new_cov=new, calls=len(seq))
            if ex.outcome.report is not None:
                record["bug"] = ex.outcome.report.kind
                if ex.outcome.is_bug:
                    bug = (seq, ex.outcome.report, ex.trace, run_seed)
        except Exception as exc:  # recorded, never fatal to the campaign
            record.update(outcome="error", error=f"{type(exc).__name__}: {exc}", new_cov=0)
        with self.lock:
            self.results.append((phase, i, record, bug, len(self.corpus.coverage())))

    def run_phase(self, phase: int, budget: int) -> None:
        if self.cfg.workers == 1:
            for i in range(budget):
                self.one(phase, i)
            return
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            list(pool.map(lambda i: self.one(phase, i), range(budget)))


def fuzz_campaign(cfg: CampaignConfig) -> CampaignReport:
    """Run both phases and, if ``cfg.out_dir`` is set, persist everything.

    With one worker the campaign is fully deterministic for a fixed seed.
    """
    camp = _Campaign(cfg)
    camp.run_phase(PHASE_SEQ, cfg.phase1_budget)
    camp.run_phase(PHASE_CONC, cfg.phase2_budget)
    report = CampaignReport(corpus=camp.corpus)
    results = sorted(camp.results, key=lambda r: (r[0], r[1]))
    running_cov = 0
    for n, (phase, i, record, bug, _) in enumerate(results, 1):
        running_cov += record.get("new_cov", 0)
        report.records.append(record)
        report.coverage_curve.append((n, running_cov))
        if bug is not None:
            seq, bug_report, trace, run_seed = bug
            report.bugs.append(BugRecord(len(report.bugs), phase, i, seq, bug_report, trace, run_seed))
    if cfg.out_dir is not None:
        save_report(report, cfg)
    return report


def save_report(report: CampaignReport, cfg: CampaignConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "target.cct").write_text(m.render_target_spec(cfg.spec))
    with open(out / "report.jsonl", "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    report.corpus.save(out / "corpus")
    bugs = out / "bugs"
    bugs.mkdir(exist_ok=True)
    for b in report.bugs:
        stem = bugs / f"bug_{b.bug_id:04d}"
        stem.with_suffix(".cseq").write_text(m.render_call_sequence(b.seq))
        program = m.instantiate_input(cfg.spec, b.seq)
        stem.with_suffix(".ccp").write_text(m.render_program(program))
        b.trace.write(stem.with_suffix(".trace.jsonl"))
        meta = {"bug_id": b.bug_id, "phase": b.phase, "exec": b.execution, "run_seed": b.run_seed,
                "strategy": cfg.strategy.as_dict(), "report": b.report.as_dict()}
        stem.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Random programs (property-test generator)
# --------------------------------------------------------------------------

_PAIRS = ((m.RCU_LOCK, m.RCU_UNLOCK), (m.PREEMPT_DISABLE, m.PREEMPT_ENABLE),
          (m.IRQ_DISABLE, m.IRQ_ENABLE), (m.NONBLOCK_ENTER, m.NONBLOCK_EXIT))
_GEN_LOCKS = (("lm", "mutex"), ("ls", "spin"), ("lr", "rwsem"), ("lc", "rcu"))


def generate_program(rng: random.Random, max_threads: int = 3, max_events: int = 8,
                     max_depth: int = 2) -> m.Program:
    """Random well-formed program: workers of memory events, matched
    counter pairs and lock sections, spawned and joined by ``main``.

    Lock sections nest in one global order, so no wait-for cycle can form.
    """
    n_obj = rng.randint(1, 3)
    objects = tuple((f"x{i}", rng.randint(-3, 3)) for i in range(n_obj)) + (("p", 1),)
    n_workers = rng.randint(1, max_threads)
    workers = []
    for w in range(n_workers):
        body: list = []
        _gen_block(rng, body, max_events, max_depth, n_obj, set(), w)
        workers.append((f"w{w}", tuple(body) + (m.EXIT_EVENT,)))
    main = tuple(m.Event(m.SPAWN, name) for name, _ in workers)
    main += tuple(m.Event(m.JOIN, name) for name, _ in workers) + (m.EXIT_EVENT,)
    return m.Program(objects, _GEN_LOCKS, (("main", main),) + tuple(workers), "main")


def _gen_block(rng, body, budget, depth, n_obj, held, w) -> int:
    used = 0
    while used < budget:
        r = rng.random()
        obj = f"x{rng.randrange(n_obj)}"
        if r < 0.35 or depth == 0:
            kind = rng.choice((m.LOAD, m.STORE, m.STORE, m.DEREF, m.YIELD, m.COMPUTE))
            if kind == m.LOAD:
                body.append(m.Event(m.LOAD, obj, "r0"))
            elif kind == m.STORE:
                body.append(m.Event(m.STORE, obj, m.BinOp("r0", "+", m.Const(rng.randint(1, 3)))))
            elif kind == m.DEREF:
                body.append(m.Event(m.DEREF, "p", "r1"))
            elif kind == m.YIELD:
                body.append(m.Event(m.YIELD))
            else:
                body.append(m.Event(m.COMPUTE, None, m.Const(rng.randint(1, 4))))
            used += 1
        elif r < 0.65:
            enter, leave = rng.choice(_PAIRS)
            body.append(m.Event(enter))
            used += 1 + _gen_block(rng, body, max(1, (budget - used) // 2), depth - 1, n_obj, held, w)
            body.append(m.Event(leave))
            used += 1
        else:
            free = [name for name, _ in _GEN_LOCKS if name not in held]
            later = [n for n in free if all(_GEN_ORDER[n] > _GEN_ORDER[h] for h in held)]
            if not later:
                continue
            name = rng.choice(later)
            mode = rng.choice(("read", "write")) if name == "lr" else "excl"
            body.append(m.Event(m.ACQUIRE, name, mode))
            held.add(name)
            used += 1 + _gen_block(rng, body, max(1, (budget - used) // 2), depth - 1, n_obj, held, w)
            held.discard(name)
            body.append(m.Event(m.RELEASE, name))
            used += 1
    return used


_GEN_ORDER = {name: i for i, (name, _) in enumerate(_GEN_LOCKS)}
