"""Weight-assignment strategies for the controlled scheduler.

Every strategy maintains a ``weights`` mapping over task ids; the scheduler
dispatches the enabled task with the highest weight. The pure ``*_update``
functions hold the rules; the ``Strategy`` classes bind them to an RNG and
to the scheduler callbacks (``on_spawn``, ``on_decision``, ``on_event``,
``on_busy_wait``).
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from cctsim import model as m

KINDS = ("rw", "rp", "pos", "pct", "oslike")

# Scheduler overrides for the OS-like baseline: no injected points, only
# blocking operations and a coarse time slice.
OSLIKE_SLICE = 200


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "rw"
    pct_depth: int = 3
    # PCT event-count estimate; None means "measure with a trial run".
    pct_events: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown algorithm {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.pct_depth < 1:
            raise ValueError("pct depth must be >= 1")
        if self.pct_events is not None and self.pct_events < 1:
            raise ValueError("pct event estimate must be >= 1")

    def as_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "pct":
            out["pct_depth"] = self.pct_depth
            if self.pct_events is not None:
                out["pct_events"] = self.pct_events
        return out


# --------------------------------------------------------------------------
# Pure rules
# --------------------------------------------------------------------------


def rw_update(enabled, rng: random.Random) -> dict:
    """Fresh i.i.d. uniform weight for every enabled task (uniform pick)."""
    return {t: rng.random() for t in sorted(enabled)}


def rp_update(weights: dict, last_tid, rng: random.Random) -> dict:
    """Resample only the most recently executed task's weight."""
    out = dict(weights)
    if last_tid is not None:
        out[last_tid] = rng.random()
    return out


def interferes(e1: m.Event | None, e2: m.Event | None) -> bool:
    """Same object, at least one destructive (store/free) access."""
    if e1 is None or e2 is None:
        return False
    k1, k2 = e1.kind, e2.kind
    if k1 not in _MEM or k2 not in _MEM:
        return False
    return e1.target == e2.target and (k1 in _DESTRUCTIVE or k2 in _DESTRUCTIVE)


_MEM = frozenset({m.LOAD, m.STORE, m.FREE, m.DEREF})
_DESTRUCTIVE = frozenset({m.STORE, m.FREE})


def pos_update(weights: dict, last_tid, last_event, enabled_with_next_events: dict,
               rng: random.Random, *, interference=interferes) -> dict:
    """RP update plus resampling of every enabled task whose next event
    interferes with the event just executed."""
    out = dict(weights)
    if last_tid is not None:
        out[last_tid] = rng.random()
    for tid in sorted(enabled_with_next_events):
        if tid != last_tid and interference(last_event, enabled_with_next_events[tid]):
            out[tid] = rng.random()
    return out


@dataclass
class PctState:
    priorities: dict  # task key -> int
    change_points: list  # in draw order; the i-th point demotes to priority i
    counter: int = 0
    events: int = 1
    demotions: int = 0


def pct_init(n_tasks: int, events: int, depth: int, rng: random.Random) -> PctState:
    """Random distinct priorities in [d+1, d+n] plus d-1 change points in [1, E]."""
    if n_tasks < 1 or events < 1 or depth < 1:
        raise ValueError("pct_init needs n_tasks, events, depth >= 1")
    values = list(range(depth + 1, depth + n_tasks + 1))
    rng.shuffle(values)
    points = rng.sample(range(1, events + 1), min(depth - 1, events))
    return PctState(dict(enumerate(values)), points, 0, events)


def pct_on_event(state: PctState, running) -> int | None:
    """Advance the event counter; demote ``running`` at a change point.

    Returns the new priority when a demotion happened, else None.
    """
    state.counter += 1
    try:
        i = state.change_points.index(state.counter)
    except ValueError:
        return None
    state.priorities[running] = i + 1
    state.demotions += 1
    return i + 1


# --------------------------------------------------------------------------
# Strategies bound to the scheduler
# --------------------------------------------------------------------------


class Strategy:
    name = "base"
    uses_next_events = False

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.weights: dict = {}

    def scheduler_overrides(self) -> dict:
        return {}

    def on_spawn(self, tid: int) -> None:
        pass

    def on_decision(self, last_tid, last_event, enabled, next_events) -> None:
        raise NotImplementedError

    def on_event(self, tid: int) -> None:
        pass

    def on_busy_wait(self, tid: int) -> None:
        pass


class RandomWalk(Strategy):
    name = "rw"

    def on_decision(self, last_tid, last_event, enabled, next_events) -> None:
        self.weights = rw_update(enabled, self.rng)


class OsLike(RandomWalk):
    """Uniform pick, invoked only at blocking points and coarse slices."""

    name = "oslike"

    def scheduler_overrides(self) -> dict:
        return {"sample_rate": 0.0, "slice_events": OSLIKE_SLICE}


class RandomPriority(Strategy):
    name = "rp"

    def on_spawn(self, tid: int) -> None:
        self.weights[tid] = self.rng.random()

    def on_decision(self, last_tid, last_event, enabled, next_events) -> None:
        self.weights = rp_update(self.weights, last_tid, self.rng)


class PartialOrderSampling(RandomPriority):
    name = "pos"
    uses_next_events = True

    def on_decision(self, last_tid, last_event, enabled, next_events) -> None:
        self.weights = pos_update(self.weights, last_tid, last_event, next_events, self.rng)


class Pct(Strategy):
    name = "pct"

    def __init__(self, rng: random.Random, tids, events: int, depth: int):
        super().__init__(rng)
        tids = list(tids)
        self.state = pct_init(len(tids), events, depth, rng)
        self.state.priorities = {tids[i]: p for i, p in self.state.priorities.items()}
        self.weights = self.state.priorities

    def on_decision(self, last_tid, last_event, enabled, next_events) -> None:
        pass

    def on_event(self, tid: int) -> None:
        pct_on_event(self.state, tid)

    def on_busy_wait(self, tid: int) -> None:
        self.state.priorities[tid] = min(self.state.priorities.values()) - 1


def make_strategy(config: StrategyConfig, rng: random.Random, tids=(), events: int = 1) -> Strategy:
    kind = config.kind
    if kind == "rw":
        return RandomWalk(rng)
    if kind == "oslike":
        return OsLike(rng)
    if kind == "rp":
        return RandomPriority(rng)
    if kind == "pos":
        return PartialOrderSampling(rng)
    return Pct(rng, tids, events, config.pct_depth)

