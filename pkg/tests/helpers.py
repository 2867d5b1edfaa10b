from __future__ import annotations

from cctsim import model as m
from cctsim.algos import StrategyConfig
from cctsim.scheduler import SchedParams, run_controlled


def prog(text: str) -> m.Program:
    return m.parse_program(text)


def run(program, algo="rw", seed=0, **params):
    return run_controlled(program, StrategyConfig(algo), SchedParams(rng_seed=seed, **params))


def single_thread(*events) -> m.Program:
    body = "\n".join(f"  {e}" for e in events)
    return prog(f"object x 0\nobject y 0\nthread main:\n{body}\n")
