from __future__ import annotations

import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from pocaii.cli import main
from pocaii.experiment import (
    ConfigError,
    LogError,
    average_ranks,
    cmd_compare,
    cmd_resume,
    cmd_run,
    compare_tables,
    incumbent_on_grid,
    parse_config,
    read_log,
    sign_test,
)


def _write_config(tmp_path, **overrides):
    raw = {
        "algorithm": {"name": "pocaii"},
        "objective": {"type": "synthetic", "noise": 0.005},
        "budget": 1000,
        "seeds": [1, 2],
        "output": str(tmp_path / "runs"),
    }
    raw.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def _strip(path):
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        rec.pop("timestamp", None)
        out.append(rec)
    return out


def _events(path):
    return read_log(path)[1]


def test_run_spends_budget(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--seed", "1"]) == 0
    log = tmp_path / "runs" / "pocaii-seed1.jsonl"
    events = _events(log)
    assert 1000 - 1 < events[-1]["cumulative_spent"] <= 1000
    spent = [e["cumulative_spent"] for e in events]
    assert spent == sorted(spent)
    assert all(e["budget_debited"] > 0 for e in events)
    summary = json.loads((tmp_path / "runs" / "pocaii-seed1.summary.json").read_text())
    assert summary["spent"] == events[-1]["cumulative_spent"]
    assert summary["incumbent_score"] == pytest.approx(max(e["incumbent_score"] for e in events))
    assert "log:" in capsys.readouterr().out


def test_log_records_have_required_fields(tmp_path):
    cfg = _write_config(tmp_path, budget=200)
    main(["run", "--config", str(cfg)])
    header, events, end = read_log(tmp_path / "runs" / "pocaii-seed1.jsonl")
    assert header["seed"] == 1 and end is not None
    required = {"run_id", "seed", "algorithm", "config_id", "event", "budget_debited", "cumulative_spent",
                "latest_score", "incumbent_score", "timestamp"}
    for e in events:
        assert required <= set(e)
        assert e["event"] in {"sampled", "trained", "selected", "flushed", "failed"}


def test_run_twice_identical_modulo_timestamps(tmp_path):
    cfg = _write_config(tmp_path, budget=300)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert _strip(tmp_path / "a" / "pocaii-seed1.jsonl") == _strip(tmp_path / "b" / "pocaii-seed1.jsonl")


def test_infeasible_budget_exits_nonzero(tmp_path, capsys):
    cfg = _write_config(tmp_path, budget=3)
    assert main(["run", "--config", str(cfg)]) == 2
    assert "infeasible budget" in capsys.readouterr().err
    assert not (tmp_path / "runs" / "pocaii-seed1.jsonl").exists()


@pytest.mark.parametrize(
    "override, message",
    [
        ({"algorithm": {"name": "smac"}}, "unknown algorithm"),
        ({"algorithm": {"name": "pocaii", "params": {"learning_rate": 1}}}, "unknown parameters"),
        ({"seeds": [1, 1]}, "distinct"),
        ({"objective": {"type": "mnist"}}, "unknown objective"),
        ({"objective": {"type": "subprocess"}}, "command"),
        ({"space": [{"name": "x", "type": "continuous", "low": 1, "high": 0}]}, "low < high"),
        ({"algorithm": [{"name": "random"}, {"name": "random"}]}, "unique"),
    ],
)
def test_config_errors(tmp_path, capsys, override, message):
    cfg = _write_config(tmp_path, **override)
    assert main(["run", "--config", str(cfg)]) == 2
    assert message in capsys.readouterr().err


def test_missing_key():
    with pytest.raises(ConfigError, match="budget"):
        parse_config({"algorithm": "pocaii", "objective": {"type": "synthetic"}})


def test_each_algorithm_runs(tmp_path):
    algs = [
        {"name": "pocaii", "params": {"delta": 5, "n_search": 4}},
        {"name": "hyperband", "params": {"delta_min": 5, "beta_max": 20}},
        {"name": "successive-halving", "params": {"n": 8, "delta_start": 5, "beta_max": 40}},
        {"name": "random", "params": {"delta_eval": 10}},
    ]
    cfg = parse_config({"algorithm": algs, "objective": {"type": "synthetic"}, "budget": 400, "seeds": [0]})
    for alg in cfg.algorithms:
        res = cmd_run(cfg, 0, str(tmp_path), alg=alg)
        assert 0 < res.summary["spent"] <= 400
        assert res.summary["algorithm"] == alg.label


def test_custom_space_and_worker_cmd(tmp_path):
    space = [
        {"name": "x1", "type": "continuous", "low": 0, "high": 1},
        {"name": "x2", "type": "continuous", "low": 0, "high": 1},
        {"name": "c", "type": "categorical", "choices": ["A", "B", "C"]},
    ]
    cfg = _write_config(tmp_path, budget=150, space=space)
    worker = f"{sys.executable} -m pocaii.worker"
    assert main(["run", "--config", str(cfg), "--worker-cmd", worker, "--out", str(tmp_path / "sub")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "local")]) == 0
    sub = _strip(tmp_path / "sub" / "pocaii-seed1.jsonl")[1:]
    local = _strip(tmp_path / "local" / "pocaii-seed1.jsonl")[1:]
    assert sub == local


def test_failing_worker_is_logged_and_run_continues(tmp_path):
    script = tmp_path / "w.py"
    script.write_text(
        "import json, sys\n"
        "for line in sys.stdin:\n"
        "    r = json.loads(line)\n"
        "    if r['params']['c'] == 'C':\n"
        "        print(json.dumps({'id': r['id'], 'error': 'diverged'}), flush=True); continue\n"
        "    m = [[b, r['params']['x1'] * b / (b + 5)] for b in range(r['start'] + 1, r['end'] + 1)]\n"
        "    print(json.dumps({'id': r['id'], 'measurements': m, 'checkpoint': None}), flush=True)\n"
    )
    cfg = _write_config(tmp_path, budget=200, objective={"type": "subprocess", "command": f"{sys.executable} {script}"})
    assert main(["run", "--config", str(cfg)]) == 0
    events = _events(tmp_path / "runs" / "pocaii-seed1.jsonl")
    failed = [e for e in events if e["event"] == "failed"]
    assert failed and all("diverged" in e["error"] and e["latest_score"] is None for e in failed)
    assert events[-1]["cumulative_spent"] == 200


# -- resume ------------------------------------------------------------------


def test_interrupt_and_resume_reproduces_run(tmp_path, capsys):
    cfg = _write_config(tmp_path, budget=500)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "full")])
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "cut"), "--stop-after", "200"]) == 3
    log = tmp_path / "cut" / "pocaii-seed1.jsonl"
    assert read_log(log)[2] is None
    assert main(["resume", str(log)]) == 0
    assert _strip(log) == _strip(tmp_path / "full" / "pocaii-seed1.jsonl")


def test_resume_completed_is_noop(tmp_path, capsys):
    cfg = _write_config(tmp_path, budget=100)
    main(["run", "--config", str(cfg)])
    log = tmp_path / "runs" / "pocaii-seed1.jsonl"
    before = log.read_text()
    capsys.readouterr()
    assert main(["resume", str(log)]) == 0
    assert "nothing to do" in capsys.readouterr().out
    assert log.read_text() == before
    assert cmd_resume(log) is None


def test_resume_truncated_line_names_it(tmp_path, capsys):
    cfg = _write_config(tmp_path, budget=100)
    main(["run", "--config", str(cfg), "--stop-after", "50"])
    log = tmp_path / "runs" / "pocaii-seed1.jsonl"
    text = log.read_text()
    n_lines = text.count("\n")
    log.write_text(text[:-20])
    assert main(["resume", str(log)]) == 2
    assert f":{n_lines}: truncated line" in capsys.readouterr().err


def test_resume_corrupt_line_names_it(tmp_path):
    cfg = _write_config(tmp_path, budget=100)
    main(["run", "--config", str(cfg), "--stop-after", "50"])
    log = tmp_path / "runs" / "pocaii-seed1.jsonl"
    lines = log.read_text().splitlines(keepends=True)
    lines[3] = "{\"type\": \"event\", oops\n"
    log.write_text("".join(lines))
    with pytest.raises(LogError, match=":4: corrupt record"):
        cmd_resume(log)


def test_resume_detects_divergent_log(tmp_path):
    cfg = _write_config(tmp_path, budget=100)
    main(["run", "--config", str(cfg), "--stop-after", "50"])
    log = tmp_path / "runs" / "pocaii-seed1.jsonl"
    lines = log.read_text().splitlines(keepends=True)
    rec = json.loads(lines[2])
    rec["config_id"] = 99
    lines[2] = json.dumps(rec) + "\n"
    log.write_text("".join(lines))
    with pytest.raises(LogError, match="diverged"):
        cmd_resume(log)


def test_resume_with_subprocess_worker(tmp_path):
    worker = f"{sys.executable} -m pocaii.worker"
    cfg = _write_config(tmp_path, budget=200, objective={"type": "subprocess", "command": worker})
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "full")])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "cut"), "--stop-after", "80"])
    log = tmp_path / "cut" / "pocaii-seed1.jsonl"
    assert main(["resume", str(log)]) == 0
    assert _strip(log) == _strip(tmp_path / "full" / "pocaii-seed1.jsonl")


# -- compare -----------------------------------------------------------------


def _toy_events(points):
    return [{"cumulative_spent": s, "incumbent_score": v} for s, v in points]


def test_incumbent_on_grid():
    ev = _toy_events([(5, 0.1), (10, 0.3), (15, 0.3), (20, 0.5)])
    got = incumbent_on_grid(ev, [4, 5, 12, 20])
    assert np.isnan(got[0]) and list(got[1:]) == [0.1, 0.3, 0.5]


def test_stderr_hand_computed_toy():
    # three seeds with final incumbents 0.5, 0.6, 0.9 -> mean 2/3,
    # sample std sqrt(((1/6)^2 + (1/15)^2 + (7/30)^2) / 2) = sqrt(0.0433...) and se = std / sqrt(3)
    runs = {
        "pocaii": {s: _toy_events([(10, v)]) for s, v in zip((1, 2, 3), (0.5, 0.6, 0.9))},
        "random": {s: _toy_events([(10, 0.4)]) for s in (1, 2, 3)},
    }
    traj, ranks, tests = compare_tables(runs, 10, 10)
    row = next(r for r in traj if r["algorithm"] == "pocaii")
    assert row["mean_score"] == pytest.approx(2 / 3)
    assert row["stderr"] == pytest.approx(math.sqrt((1 / 36 + 1 / 225 + 49 / 900) / 2) / math.sqrt(3))
    assert row["stderr"] == pytest.approx(0.120185, abs=1e-6)
    assert tests == [{"baseline": "random", "wins": 3, "losses": 0, "ties": 0, "p_value": 0.125}]
    assert {r["algorithm"]: r["mean_rank"] for r in ranks} == {"pocaii": 1.0, "random": 2.0}


def test_rank_ties_and_conservation():
    vals = np.array([[0.5, 0.2, np.nan], [0.5, 0.3, 0.1], [0.4, 0.3, 0.2]])
    r = average_ranks(vals)
    # seed-wise ranks: [1.5,1.5,3], [3,1.5,1.5], [3,2,1]
    assert r == pytest.approx([(1.5 + 3 + 3) / 3, (1.5 + 1.5 + 2) / 3, (3 + 1.5 + 1) / 3])
    assert r.sum() == pytest.approx(6.0)


def test_sign_test_drops_ties():
    res = sign_test([1, 2, 3, 4], [0, 2, 5, 1])
    assert (res["wins"], res["losses"], res["ties"]) == (2, 1, 1)
    assert res["p_value"] == pytest.approx(0.5)


def test_compare_seed_mismatch():
    runs = {"a": {1: _toy_events([(5, 0.1)])}, "b": {2: _toy_events([(5, 0.1)])}}
    with pytest.raises(ValueError, match="seeds"):
        compare_tables(runs, 5, 5)


def test_compare_identical_algorithms(tmp_path, capsys):
    cfg = _write_config(
        tmp_path,
        budget=200,
        seeds=[1, 2, 3],
        algorithm=[{"name": "random", "label": "r1", "params": {"delta_eval": 10}},
                   {"name": "random", "label": "r2", "params": {"delta_eval": 10}}],
    )
    assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / "cmp"), "--parallel", "2"]) == 0
    with open(tmp_path / "cmp" / "ranks.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["mean_rank"]) == 1.5 for r in rows)
    with open(tmp_path / "cmp" / "trajectory.csv") as fh:
        traj = list(csv.DictReader(fh))
    grid = sorted({int(r["budget"]) for r in traj})
    assert grid == list(range(5, 201, 5))
    assert len(traj) == 2 * len(grid)


def test_compare_pocaii_vs_baselines(tmp_path):
    cfg = parse_config(
        {
            "algorithm": ["pocaii", "random", {"name": "hyperband", "params": {"delta_min": 5, "beta_max": 20}}],
            "objective": {"type": "synthetic"},
            "budget": 400,
            "seeds": [1, 2, 3],
        }
    )
    res = cmd_compare(cfg, str(tmp_path))
    assert [t["baseline"] for t in res["sign_tests"]] == ["random", "hyperband"]
    by_budget = {}
    for r in res["ranks"]:
        by_budget.setdefault(r["budget"], []).append(r["mean_rank"])
    assert all(sum(v) == pytest.approx(6.0) for v in by_budget.values())
    assert (tmp_path / "sign_test.csv").exists()


def test_compare_needs_two_of_each(tmp_path):
    cfg = parse_config({"algorithm": "pocaii", "objective": {"type": "synthetic"}, "budget": 100, "seeds": [1, 2]})
    with pytest.raises(ConfigError):
        cmd_compare(cfg, str(tmp_path))


def test_console_script_entry_point(tmp_path):
    cfg = _write_config(tmp_path, budget=60)
    proc = subprocess.run(
        [sys.executable, "-m", "pocaii.cli", "run", "--config", str(cfg), "--seed", "7"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout[: proc.stdout.index("log:")])["spent"] == 60
