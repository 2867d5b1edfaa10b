from __future__ import annotations

import json
import subprocess
import sys


from cctsim import cli


def call(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    pairs = dict(tok.split("=", 1) for tok in out.out.split() if "=" in tok)
    return code, pairs, out.err


def test_run_reports_race_without_failing(capsys):
    code, out, _ = call(capsys, "run", "bench:race1")
    assert code == cli.EXIT_OK
    assert out["outcome"] == "completed" and out["races"] == "1"
    assert call(capsys, "run", "bench:race1_locked")[1]["races"] == "0"


def test_run_reports_heap_fault(capsys):
    codes = {call(capsys, "run", "bench:jfs_toy", "--seed", s)[0] for s in range(30)}
    assert cli.EXIT_BUG in codes


def test_run_completed(tmp_path, capsys):
    p = tmp_path / "ok.ccp"
    p.write_text("object x 0\nthread main:\n  store x 1\n  exit\n")
    assert call(capsys, "run", p)[0] == cli.EXIT_OK


def test_run_deadlock_exit_code(capsys):
    codes = {call(capsys, "run", "bench:dl1", "--seed", s, "--sample-rate", 1)[0] for s in range(40)}
    assert cli.EXIT_DEADLOCK in codes


def test_livelock_exit_code(tmp_path, capsys):
    p = tmp_path / "spin.ccp"
    p.write_text("thread main:\n  label top\n  goto top\n")
    assert call(capsys, "run", p, "--max-steps", 200)[0] == cli.EXIT_LIVELOCK


def test_run_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    first = call(capsys, "run", "bench:jfs_toy", "--algo", "pos", "--seed", 9, "--trace", a)
    second = call(capsys, "run", "bench:jfs_toy", "--algo", "pos", "--seed", 9, "--trace", b)
    assert first == second
    assert a.read_text() == b.read_text()


def test_replay_round_trip_and_divergence(tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    code, out, _ = call(capsys, "run", "bench:race1_assert", "--seed", 3, "--sample-rate", 1, "--trace", t)
    assert call(capsys, "replay", "bench:race1_assert", t)[:2] == (code, out)
    lines = t.read_text().splitlines()
    rec = json.loads(lines[2])
    rec["pc"] = rec["pc"] + 7
    lines[2] = json.dumps(rec)
    t.write_text("\n".join(lines) + "\n")
    code, out, _ = call(capsys, "replay", "bench:race1_assert", t)
    assert code == cli.EXIT_DIVERGENCE and "divergence" in out


def test_replay_wrong_program_is_usage_error(tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    call(capsys, "run", "bench:race1", "--trace", t)
    assert call(capsys, "replay", "bench:dl1", t)[0] == cli.EXIT_USAGE


def test_usage_errors(tmp_path, capsys):
    assert call(capsys, "run", "bench:race1", "--sample-rate", 2)[0] == cli.EXIT_USAGE
    assert call(capsys, "run", "bench:nope")[0] == cli.EXIT_USAGE
    bad = tmp_path / "bad.ccp"
    bad.write_text("thread main:\n  acquire L\n")
    code, _, err = call(capsys, "run", bad)
    assert code == cli.EXIT_USAGE and "L" in err
    assert call(capsys, "run", "bench:race1", "--algo", "pct", "--pct-depth", 0)[0] == cli.EXIT_USAGE
    assert call(capsys, "run", "bench:race1", "--algo", "dfs")[0] == cli.EXIT_USAGE


def test_missing_file_is_io_error(tmp_path, capsys):
    assert call(capsys, "run", tmp_path / "missing.ccp")[0] == cli.EXIT_IO


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.conf"
    cfg.write_text("algo = pct\npct_depth = 2\nseed = 4\n")
    t1, t2 = tmp_path / "1.jsonl", tmp_path / "2.jsonl"
    call(capsys, "run", "bench:order2", "--config", cfg, "--trace", t1)
    head = json.loads(t1.read_text().splitlines()[0])
    assert head["strategy"]["kind"] == "pct" and head["seed"] == 4
    call(capsys, "run", "bench:order2", "--config", cfg, "--seed", 5, "--trace", t2)
    assert json.loads(t2.read_text().splitlines()[0])["seed"] == 5
    cfg.write_text("colour = blue\n")
    assert call(capsys, "run", "bench:order2", "--config", cfg)[0] == cli.EXIT_USAGE


def test_explore(capsys):
    code, out, _ = call(capsys, "explore", "bench:jfs_toy", "--trials", 50)
    assert code == 0 and int(out["trials"]) <= 50
    code, out, _ = call(capsys, "explore", "bench:race1_locked", "--trials", 5)
    assert out == {"censored": "5"}


def test_target_with_sibling_calls(tmp_path, capsys):
    from cctsim import bench
    (tmp_path / "t.cct").write_text(bench.source("jfs_toy.cct"))
    (tmp_path / "t.cseq").write_text(bench.source("jfs_toy.cseq"))
    code, out, _ = call(capsys, "explore", tmp_path / "t.cct", "--trials", 100)
    assert "trials" in out


def test_fuzz_writes_outputs(tmp_path, capsys):
    out_dir = tmp_path / "f"
    code, out, _ = call(capsys, "fuzz", "bench:jfs_toy", "--phase1-budget", 10, "--phase2-budget", 40,
                        "--out", out_dir)
    assert code == 0 and int(out["executions"]) == 50
    assert (out_dir / "report.jsonl").exists()


def test_bench_and_stats(tmp_path, capsys):
    out_dir = tmp_path / "b"
    code, _, _ = call(capsys, "bench", "--only", "order1", "--trials", 20, "--meta-seeds", 3, "--out", out_dir)
    assert code == 0
    rw = out_dir / "trials_order1_rw.csv"
    assert rw.exists() and (out_dir / "km_order1_rw.csv").exists()
    code, out, _ = call(capsys, "stats", "km", rw, "--out", tmp_path / "km.csv")
    assert code == 0 and (tmp_path / "km.csv").exists()
    code, out, _ = call(capsys, "stats", "logrank", rw, out_dir / "trials_order1_oslike.csv")
    assert code == 0 and 0 <= float(out["p"]) <= 1 and out["low_power"] == "1"
    counts = tmp_path / "counts.csv"
    counts.write_text("10\n12\n11\n")
    code, out, _ = call(capsys, "stats", "chisq", counts)
    assert code == 0 and float(out["p"]) > 0.5
    assert call(capsys, "stats", "logrank", rw)[0] == cli.EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cctsim", "run", "bench:race1_locked"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "outcome=completed" in res.stdout


def test_fuzz_zero_budgets(tmp_path, capsys):
    code, out, _ = call(capsys, "fuzz", "bench:jfs_toy", "--phase1-budget", 0, "--phase2-budget", 0,
                        "--out", tmp_path / "z")
    assert code == 0 and out["executions"] == "0" and out["bugs"] == "0"


def test_replay_saved_bug_pair(tmp_path, capsys):
    out_dir = tmp_path / "f"
    call(capsys, "fuzz", "bench:jfs_toy", "--phase1-budget", 20, "--phase2-budget", 100, "--workers", 4,
         "--out", out_dir)
    pairs = sorted((out_dir / "bugs").glob("*.ccp"))
    assert pairs
    for prog_file in pairs[:5]:
        trace = prog_file.with_suffix(".trace.jsonl")
        code, out, _ = call(capsys, "replay", prog_file, trace)
        assert code == cli.EXIT_BUG and out["bug"] == "NullDeref"


def test_stats_defaults(tmp_path, capsys):
    rw = tmp_path / "trials_rw.csv"
    rw.write_text("trials,censored\n3,0\n5,1\n2,0\n")
    code, out, _ = call(capsys, "stats", "km", rw)
    rows = (tmp_path / "km_rw.csv").read_text().splitlines()[1:]
    surv = [float(r.split(",")[3]) for r in rows]
    assert code == 0 and surv == sorted(surv, reverse=True)
    code, out, _ = call(capsys, "stats", "logrank", rw, rw)
    assert (out["stat"], out["p"]) == ("0", "1")
