"""Command-line front end.

Every result line on stdout is a space-separated list of ``key=value``
pairs. Exit codes: 0 completed, 10 bug, 11 deadlock, 12 livelock,
13 replay divergence, 2 usage error, 1 I/O error.
"""

from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path

from cctsim import bench, fuzz, model, oracles, stats
from cctsim.algos import KINDS, StrategyConfig
from cctsim.scheduler import (BUG, COMPLETED, DEADLOCK, LIVELOCK, Divergence, HashMismatch,
                              SchedParams, Trace, execute, replay)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_BUG = 10
EXIT_DEADLOCK = 11
EXIT_LIVELOCK = 12
EXIT_DIVERGENCE = 13
OUTCOME_EXIT = {COMPLETED: EXIT_OK, BUG: EXIT_BUG, DEADLOCK: EXIT_DEADLOCK, LIVELOCK: EXIT_LIVELOCK}

# Settings a config file may provide, with their defaults and parsers.
_DEFAULTS = {
    "algo": ("rw", str),
    "pct_depth": (3, int),
    "seed": (0, int),
    "meta_seed": (0, int),
    "sample_rate": (0.1, float),
    "slice": ("20", str),
    "max_steps": (1_000_000, int),
    "fairness_bound": ("100000", str),
    "spin_window": (64, int),
    "trials": (100, int),
    "workers": (1, int),
    "phase1_budget": (100, int),
    "phase2_budget": (100, int),
    "par_calls": (2, int),
    "max_len": (4, int),
    "meta_seeds": (20, int),
    "out": (None, str),
}


class UsageError(Exception):
    pass


def emit(**pairs) -> None:
    print(" ".join(f"{k}={v}" for k, v in pairs.items() if v is not None))


def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _settings(args) -> dict:
    """Merge flags over config file over defaults."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key, (default, conv) in _DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in cfg:
            try:
                out[key] = conv(cfg[key])
            except ValueError:
                raise UsageError(f"config: bad value for {key}: {cfg[key]!r}") from None
        else:
            out[key] = default
    return out


def _optional_int(text, name) -> int | None:
    if str(text).lower() in ("off", "none", "inf"):
        return None
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"--{name} expects an integer or 'off'") from None


def _strategy(s: dict) -> StrategyConfig:
    try:
        return StrategyConfig(s["algo"], s["pct_depth"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _params(s: dict, seed: int | None = None) -> SchedParams:
    try:
        return SchedParams(
            sample_rate=s["sample_rate"],
            slice_events=_optional_int(s["slice"], "slice"),
            max_steps=s["max_steps"],
            fairness_bound=_optional_int(s["fairness_bound"], "fairness-bound"),
            spin_window=s["spin_window"],
            rng_seed=s["seed"] if seed is None else seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_program(ref: str) -> model.Program:
    """A ``.ccp`` path, a ``.cct`` path with a sibling ``.cseq``, or
    ``bench:NAME`` for a shipped benchmark."""
    if ref.startswith("bench:"):
        try:
            return bench.get(ref[6:]).program
        except KeyError as exc:
            raise UsageError(str(exc)) from None
    path = Path(ref)
    text = path.read_text()
    if path.suffix == ".cct":
        calls = path.with_suffix(".cseq")
        return model.instantiate_input(model.parse_target_spec(text), model.parse_call_sequence(calls.read_text()))
    return model.parse_program(text)


def load_spec(ref: str) -> model.TargetSpec:
    if ref.startswith("bench:"):
        entry = bench.get(ref[6:])
        if entry.spec is None:
            raise UsageError(f"benchmark {entry.name} is a program, not a target")
        return entry.spec
    return model.parse_target_spec(Path(ref).read_text())


def _print_outcome(outcome, trace, program) -> int:
    # races are reported alongside the outcome; they do not change the exit code
    races = len(oracles.check_race(trace, program)) if outcome.kind == COMPLETED else None
    emit(**outcome.summary(), races=races, events=len(trace.events), decisions=len(trace.decisions))
    return OUTCOME_EXIT[outcome.kind]


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_run(args) -> int:
    s = _settings(args)
    program = load_program(args.program)
    ex = execute(program, _strategy(s), _params(s))
    if args.trace:
        ex.trace.write(args.trace)
    return _print_outcome(ex.outcome, ex.trace, program)


def cmd_explore(args) -> int:
    s = _settings(args)
    if s["trials"] < 1:
        raise UsageError("--trials must be >= 1")
    program = load_program(args.program)
    sample = stats.trials_to_bug(program, _strategy(s), _params(s), s["trials"], s["meta_seed"])
    if sample.censored:
        emit(censored=sample.trials)
    else:
        emit(trials=sample.trials)
    return EXIT_OK


def cmd_fuzz(args) -> int:
    s = _settings(args)
    cfg = fuzz.CampaignConfig(
        spec=load_spec(args.target), phase1_budget=s["phase1_budget"], phase2_budget=s["phase2_budget"],
        par_calls=s["par_calls"], strategy=_strategy(s), params=_params(s), workers=s["workers"],
        out_dir=s["out"] or "fuzz_out", max_len=s["max_len"], seed=s["seed"])
    report = fuzz.fuzz_campaign(cfg)
    errors = sum(1 for r in report.records if r["outcome"] == "error")
    emit(executions=report.executions, corpus=len(report.corpus), coverage=len(report.corpus.coverage()),
         bugs=len(report.bugs), errors=errors, out=cfg.out_dir)
    return EXIT_OK


def cmd_replay(args) -> int:
    program = load_program(args.program)
    trace = Trace.read(args.trace)
    try:
        out, outcome = replay(program, trace, return_trace=True)
    except Divergence as exc:
        emit(divergence=exc.step)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except HashMismatch as exc:
        raise UsageError(str(exc)) from None
    return _print_outcome(outcome, out, program)


BENCH_ALGOS = ("rw", "rp", "pos", "pct", "oslike")


def cmd_bench(args) -> int:
    s = _settings(args)
    out = Path(s["out"] or "bench_out")
    out.mkdir(parents=True, exist_ok=True)
    names = set(args.only.split(",")) if args.only else None
    for entry in bench.planted_targets():
        if entry.expected == "none" or (names and entry.name not in names):
            continue
        for algo in BENCH_ALGOS:
            strategy = StrategyConfig(algo, s["pct_depth"])
            samples = [stats.trials_to_bug(entry.program, strategy, _params(s), s["trials"], ms,
                                           races=entry.expected == oracles.DATA_RACE)
                       for ms in range(s["meta_seed"], s["meta_seed"] + s["meta_seeds"])]
            stats.write_samples(out / f"trials_{entry.name}_{algo}.csv", samples)
            curve = stats.km_curve(samples)
            stats.write_km(out / f"km_{entry.name}_{algo}.csv", curve)
            median = statistics.median(x.trials for x in samples)
            emit(bench=entry.name, algo=algo, median=median, km_median=curve.median() or "none",
                 censored=sum(x.censored for x in samples), n=len(samples))
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.test == "km":
        if len(args.files) != 1:
            raise UsageError("stats km takes one trials CSV")
        src = Path(args.files[0])
        curve = stats.km_curve(stats.read_samples(src))
        stem = src.stem[len("trials_"):] if src.stem.startswith("trials_") else src.stem
        dest = Path(args.out) if args.out else src.with_name(f"km_{stem}.csv")
        stats.write_km(dest, curve)
        emit(points=len(curve.points), median=curve.median() or "none", out=dest)
    elif args.test == "logrank":
        if len(args.files) != 2:
            raise UsageError("stats logrank takes two trials CSVs")
        res = stats.logrank(stats.read_samples(args.files[0]), stats.read_samples(args.files[1]))
        emit(stat=f"{res.statistic:.6g}", p=f"{res.p_value:.6g}", low_power=int(res.low_power))
    else:
        if len(args.files) != 1:
            raise UsageError("stats chisq takes one counts CSV")
        try:
            stat, p = stats.chi_square_uniform(stats.read_counts(args.files[0]))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        emit(stat=f"{stat:.6g}", p=f"{p:.6g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _sched_flags(p) -> None:
    g = p.add_argument_group("scheduling")
    g.add_argument("--algo", choices=KINDS, help="scheduling algorithm (default rw)")
    g.add_argument("--pct-depth", type=int, help="PCT bug depth d >= 1 (default 3)")
    g.add_argument("--seed", type=int, help="run seed, 64-bit unsigned (default 0)")
    g.add_argument("--sample-rate", type=float, help="probability of a scheduling point before each "
                   "shared-memory or lock event (default 0.1)")
    g.add_argument("--slice", help="events per dispatch before a forced point, or 'off' (default 20)")
    g.add_argument("--max-steps", type=int, help="VM step limit before livelock (default 1000000)")
    g.add_argument("--fairness-bound", help="starvation age override, or 'off' (default 100000)")
    g.add_argument("--spin-window", type=int, help="silent steps that count as a busy-wait (default 64)")
    g.add_argument("--config", help="file of 'key = value' settings; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cctsim", description="Controlled concurrency testing of modeled programs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="execute a program once under a strategy")
    p.add_argument("program", help=".ccp file, .cct with sibling .cseq, or bench:NAME")
    p.add_argument("--trace", help="write the trace as JSON Lines to this path")
    _sched_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("explore", help="count trials until the first bug")
    p.add_argument("program")
    p.add_argument("--trials", type=int, help="trial budget (default 100)")
    p.add_argument("--meta-seed", type=int, help="seed for the per-trial seeds (default 0)")
    _sched_flags(p)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("fuzz", help="two-phase fuzzing campaign on a target spec")
    p.add_argument("target", help=".cct file or bench:NAME")
    p.add_argument("--phase1-budget", type=int, help="sequential-phase executions (default 100)")
    p.add_argument("--phase2-budget", type=int, help="concurrency-phase executions (default 100)")
    p.add_argument("--par-calls", type=int, help="calls duplicated as async per input (default 2)")
    p.add_argument("--workers", type=int, help="parallel executors (default 1)")
    p.add_argument("--max-len", type=int, help="longest generated call sequence (default 4)")
    p.add_argument("--out", help="output directory (default fuzz_out)")
    _sched_flags(p)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("replay", help="re-execute a recorded trace")
    p.add_argument("program")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("bench", help="trials-to-bug for the benchmark catalog under every algorithm")
    p.add_argument("--trials", type=int, help="trial budget per sample (default 100)")
    p.add_argument("--meta-seeds", type=int, help="samples per algorithm (default 20)")
    p.add_argument("--meta-seed", type=int, help="first meta-seed (default 0)")
    p.add_argument("--only", help="comma-separated benchmark names")
    p.add_argument("--out", help="directory for trials_*.csv and km_*.csv (default bench_out)")
    _sched_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="survival and uniformity statistics from CSV files")
    p.add_argument("test", choices=("km", "logrank", "chisq"))
    p.add_argument("files", nargs="+")
    p.add_argument("--out", help="km: output CSV path (default km_<name>.csv beside the input)")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (model.DslError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except stats.TrialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
