"""Controlled concurrency testing of modeled multi-threaded programs."""

from cctsim.algos import StrategyConfig
from cctsim.model import parse_call_sequence, parse_program, parse_target_spec, instantiate_input
from cctsim.scheduler import SchedParams, Trace, replay, run_controlled

__all__ = [
    "SchedParams",
    "StrategyConfig",
    "Trace",
    "instantiate_input",
    "parse_call_sequence",
    "parse_program",
    "parse_target_spec",
    "replay",
    "run_controlled",
]

__version__ = "0.1.0"
