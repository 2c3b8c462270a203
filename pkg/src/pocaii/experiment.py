"""Experiment harness: config parsing, trial logs, resume-by-replay and comparison reports.

A trial log is line-delimited JSON: one ``header`` record, one ``event`` record
per budget debit and a closing ``end`` record. Event records carry the full
measurement batch and checkpoint token so that an interrupted run can be
rebuilt by re-executing the (seeded, deterministic) scheduler against the
logged responses, then continued against the live objective.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import binomtest, rankdata

from pocaii.arima import ArimaOrder
from pocaii.baselines import Hyperband, RandomSearch, SuccessiveHalving
from pocaii.core import PocaiiOptimizer, PocaiiParams, RunReport, TrialEvent
from pocaii.objective import (
    BenchmarkSpec,
    EvaluationRequest,
    GeometricRunner,
    MeasurementBatch,
    ObjectiveError,
    SubprocessRunner,
    SyntheticRunner,
    reference_space,
)
from pocaii.space import SearchSpace, SpaceError
from pocaii.tpe import TpeParams

ALGORITHMS = ("pocaii", "hyperband", "successive-halving", "random")

_ALGO_KEYS = {
    "pocaii": {"delta", "m", "n_search", "epsilon", "alpha", "gamma", "n_candidates", "order", "uniform_mix"},
    "hyperband": {"delta_min", "beta_max", "eta", "resume", "m"},
    "successive-halving": {"n", "delta_start", "eta", "beta_max", "resume", "m"},
    "random": {"delta_eval", "m"},
}


class ConfigError(ValueError):
    pass


class LogError(ValueError):
    pass


class Interrupted(RuntimeError):
    """Raised by the log writer once a requested stopping budget is reached."""


@dataclass(frozen=True)
class AlgorithmConfig:
    name: str
    params: Mapping[str, Any]
    label: str

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params), "label": self.label}


@dataclass(frozen=True)
class ExperimentConfig:
    space: SearchSpace
    algorithms: tuple[AlgorithmConfig, ...]
    objective: Mapping[str, Any]
    budget: int
    seeds: tuple[int, ...]
    output: str
    grid: Optional[int] = None
    raw: Mapping[str, Any] = None

    @property
    def algorithm(self) -> AlgorithmConfig:
        return self.algorithms[0]


def _parse_algorithms(entry) -> tuple[AlgorithmConfig, ...]:
    items = entry if isinstance(entry, list) else [entry]
    out = []
    for item in items:
        if isinstance(item, str):
            item = {"name": item}
        name = item.get("name")
        if name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {name!r}; choose from {', '.join(ALGORITHMS)}")
        params = dict(item.get("params", {}))
        unknown = set(params) - _ALGO_KEYS[name]
        if unknown:
            raise ConfigError(f"{name}: unknown parameters {sorted(unknown)}")
        out.append(AlgorithmConfig(name, params, item.get("label", name)))
    labels = [a.label for a in out]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"algorithm labels must be unique, got {labels}; set 'label' to disambiguate")
    return tuple(out)


def parse_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    for key in ("algorithm", "objective", "budget"):
        if key not in raw:
            raise ConfigError(f"config is missing top-level key {key!r}")
    try:
        space = SearchSpace.from_dict(raw["space"]) if "space" in raw else reference_space()
    except SpaceError as exc:
        raise ConfigError(f"invalid search space: {exc}") from None
    objective = dict(raw["objective"])
    if objective.get("type") not in ("synthetic", "subprocess", "geometric"):
        raise ConfigError(f"unknown objective type {objective.get('type')!r}")
    if objective["type"] == "subprocess" and not objective.get("command"):
        raise ConfigError("subprocess objective needs a 'command'")
    seeds = tuple(int(s) for s in raw.get("seeds", [0]))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    budget = int(raw["budget"])
    if budget <= 0:
        raise ConfigError(f"infeasible budget: {budget}")
    return ExperimentConfig(
        space=space,
        algorithms=_parse_algorithms(raw["algorithm"]),
        objective=objective,
        budget=budget,
        seeds=seeds,
        output=str(raw.get("output", "runs")),
        grid=raw.get("grid"),
        raw=copy.deepcopy(dict(raw)),
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw)


def build_objective(spec: Mapping[str, Any], worker_cmd: Optional[str] = None):
    kind = spec["type"]
    if worker_cmd is not None or kind == "subprocess":
        return SubprocessRunner(worker_cmd or spec["command"], float(spec.get("timeout", 600)))
    if kind == "synthetic":
        return SyntheticRunner(
            BenchmarkSpec(noise=float(spec.get("noise", 0.005)), seed=int(spec.get("seed", 0)))
        )
    return GeometricRunner(rate=float(spec.get("rate", 0.05)))


def build_scheduler(
    alg: AlgorithmConfig,
    space: SearchSpace,
    objective,
    budget: int,
    seed: int,
    on_event: Optional[Callable[[TrialEvent], None]] = None,
):
    p = dict(alg.params)
    try:
        if alg.name == "pocaii":
            tpe = TpeParams(gamma=p.pop("gamma", 0.15), n_candidates=p.pop("n_candidates", 24))
            order = ArimaOrder(*p.pop("order", (3, 1, 0)))
            params = PocaiiParams(budget=budget, tpe=tpe, order=order, **p)
            sched = PocaiiOptimizer(params, space, objective, seed, on_event)
        elif alg.name == "hyperband":
            sched = Hyperband(space, objective, budget, p.pop("delta_min", 5), p.pop("beta_max", 20),
                              seed=seed, on_event=on_event, **p)
        elif alg.name == "successive-halving":
            sched = SuccessiveHalving(space, objective, budget, p.pop("n", 8), p.pop("delta_start", 5),
                                      seed=seed, on_event=on_event, **p)
        else:
            sched = RandomSearch(space, objective, budget, p.pop("delta_eval", 5), seed=seed,
                                 on_event=on_event, **p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{alg.label}: {exc}") from None
    sched.algorithm = alg.label
    return sched


# ---------------------------------------------------------------------------
# trial log


def _num(x: float) -> Optional[float]:
    return x if x is not None and math.isfinite(x) else None


def _unnum(x: Optional[float]) -> float:
    return -math.inf if x is None else float(x)


def run_id(label: str, seed: int) -> str:
    return f"{label}-seed{seed}"


def event_record(rid: str, seed: int, ev: TrialEvent, timestamp: float) -> dict:
    return {
        "type": "event",
        "run_id": rid,
        "seed": seed,
        "algorithm": ev.algorithm,
        "config_id": ev.config_id,
        "event": ev.event,
        "budget_debited": ev.debited,
        "cumulative_spent": ev.spent,
        "latest_score": _num(ev.score),
        "incumbent_score": _num(ev.incumbent),
        "timestamp": timestamp,
        "iteration": ev.iteration,
        "params": ev.params,
        "start": ev.start,
        "end": ev.end,
        "measurements": ev.measurements,
        "checkpoint": ev.checkpoint,
        "error": ev.error,
    }


class LogWriter:
    """Appends one line per event; the first ``replayed`` events are checked, not written."""

    def __init__(self, path: Path, rid: str, seed: int, replayed: Sequence[dict] = (),
                 stop_after: Optional[int] = None):
        self.path = path
        self.rid = rid
        self.seed = seed
        self.replayed = list(replayed)
        self.stop_after = stop_after
        self.count = 0
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def __call__(self, ev: TrialEvent) -> None:
        i = self.count
        self.count += 1
        if i < len(self.replayed):
            old = self.replayed[i]
            if (old["config_id"], old["cumulative_spent"]) != (ev.config_id, ev.spent):
                raise LogError(
                    f"replay diverged at event {i + 1}: log has config {old['config_id']} at spent "
                    f"{old['cumulative_spent']}, scheduler produced config {ev.config_id} at {ev.spent}"
                )
            return
        self.write(event_record(self.rid, self.seed, ev, time.time()))
        if self.stop_after is not None and ev.spent >= self.stop_after:
            raise Interrupted(f"stopped after spending {ev.spent}")

    def close(self) -> None:
        self._fh.close()


class ReplayRunner:
    """Serve logged responses for requests already answered, defer the rest to ``live``."""

    def __init__(self, events: Iterable[dict], live):
        self.live = live
        self.resumable = getattr(live, "resumable", True)
        self.pending = {(e["config_id"], e["start"], e["end"]): e for e in events}

    def evaluate(self, request: EvaluationRequest) -> MeasurementBatch:
        e = self.pending.pop((request.config_id, request.start, request.end), None)
        if e is None:
            return self.live.evaluate(request)
        if e["error"] is not None:
            raise ObjectiveError(e["error"])
        return MeasurementBatch([(int(b), float(s)) for b, s in e["measurements"]], e["checkpoint"])


def read_log(path: str | os.PathLike) -> tuple[dict, list[dict], Optional[dict]]:
    """Return (header, events, end record or None); refuse corrupt lines with their number."""
    header, events, end = None, [], None
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    for n, line in enumerate(lines, start=1):
        if not line.endswith("\n"):
            raise LogError(f"{path}:{n}: truncated line")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogError(f"{path}:{n}: corrupt record ({exc.msg})") from None
        kind = rec.get("type") if isinstance(rec, dict) else None
        if n == 1:
            if kind != "header":
                raise LogError(f"{path}:1: expected a header record")
            header = rec
        elif kind == "event":
            missing = {"config_id", "start", "end", "measurements", "cumulative_spent"} - set(rec)
            if missing:
                raise LogError(f"{path}:{n}: event record missing {sorted(missing)}")
            if end is not None:
                raise LogError(f"{path}:{n}: event after end record")
            events.append(rec)
        elif kind == "end":
            end = rec
        else:
            raise LogError(f"{path}:{n}: unknown record type {kind!r}")
    if header is None:
        raise LogError(f"{path}: empty log")
    return header, events, end


def summarize(report: RunReport) -> dict:
    budgets = [t.budget for t in report.trials]
    return {
        "algorithm": report.algorithm,
        "budget": report.budget,
        "spent": report.spent,
        "incumbent_id": report.incumbent_id,
        "incumbent_score": _num(report.incumbent_score),
        "incumbent_budget": next((t.budget for t in report.trials if t.id == report.incumbent_id), None),
        "n_configs": len(report.trials),
        "n_failed": sum(t.failed for t in report.trials),
        "config_budget_mean": float(np.mean(budgets)) if budgets else 0.0,
        "config_budget_max": max(budgets, default=0),
        "iterations": report.iterations,
        "spend_by_phase": report.spend,
    }


@dataclass
class RunResult:
    log_path: Path
    summary: dict
    report: RunReport


def _execute(header: dict, replayed: list[dict], log_path: Path, worker_cmd: Optional[str],
             stop_after: Optional[int]) -> RunResult:
    cfg = parse_config(header["config"])
    alg = cfg.algorithm
    seed = int(header["seed"])
    live = build_objective(cfg.objective, worker_cmd)
    objective = ReplayRunner(replayed, live) if replayed else live
    writer = LogWriter(log_path, header["run_id"], seed, replayed, stop_after)
    try:
        sched = build_scheduler(alg, cfg.space, objective, cfg.budget, seed, writer)
        report = sched.run()
        if writer.count < len(replayed):
            raise LogError(f"{log_path}: log has {len(replayed)} events but the run produced {writer.count}")
        summary = summarize(report)
        writer.write({"type": "end", "run_id": header["run_id"], **summary})
    finally:
        writer.close()
        if isinstance(live, SubprocessRunner):
            live.close()
    summary_path = log_path.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(log_path, summary, report)


def single_config(cfg: ExperimentConfig, alg: AlgorithmConfig) -> dict:
    raw = copy.deepcopy(dict(cfg.raw))
    raw["algorithm"] = alg.to_dict()
    return raw


def cmd_run(cfg: ExperimentConfig, seed: int, out: Optional[str] = None, worker_cmd: Optional[str] = None,
            stop_after: Optional[int] = None, alg: Optional[AlgorithmConfig] = None) -> RunResult:
    """Run one optimization and write ``<label>-seed<seed>.jsonl`` plus a summary."""
    alg = alg or cfg.algorithm
    build_scheduler(alg, cfg.space, None, cfg.budget, seed)  # fail on bad params before touching the log
    out_dir = Path(out or cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    rid = run_id(alg.label, seed)
    log_path = out_dir / f"{rid}.jsonl"
    header = {"type": "header", "run_id": rid, "seed": seed, "algorithm": alg.label,
              "config": single_config(cfg, alg)}
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
    return _execute(header, [], log_path, worker_cmd, stop_after)


def cmd_resume(log_path: str | os.PathLike, worker_cmd: Optional[str] = None,
               stop_after: Optional[int] = None) -> Optional[RunResult]:
    """Continue an interrupted run; returns None if the log is already complete."""
    log_path = Path(log_path)
    header, events, end = read_log(log_path)
    if end is not None:
        return None
    return _execute(header, events, log_path, worker_cmd, stop_after)


# ---------------------------------------------------------------------------
# comparison


def _compare_job(args) -> str:
    raw, label, seed, out, worker_cmd = args
    cfg = parse_config(raw)
    alg = next(a for a in cfg.algorithms if a.label == label)
    return str(cmd_run(cfg, seed, out, worker_cmd, alg=alg).log_path)


def incumbent_on_grid(events: Sequence[dict], grid: Sequence[int]) -> np.ndarray:
    """Incumbent score after the last debit not exceeding each gridpoint (NaN before any)."""
    spent = np.array([e["cumulative_spent"] for e in events], dtype=float)
    inc = np.array([_unnum(e["incumbent_score"]) for e in events], dtype=float)
    out = np.full(len(grid), np.nan)
    for j, g in enumerate(grid):
        idx = np.searchsorted(spent, g, side="right") - 1
        if idx >= 0 and math.isfinite(inc[idx]):
            out[j] = inc[idx]
    return out


def budget_grid(budget: int, step: int) -> list[int]:
    grid = list(range(step, budget + 1, step))
    if not grid or grid[-1] != budget:
        grid.append(budget)
    return grid


def average_ranks(values: np.ndarray) -> np.ndarray:
    """values: (algorithms, seeds) scores, higher is better; NaN ranks last. Returns mean rank per algorithm."""
    filled = np.where(np.isnan(values), -np.inf, values)
    ranks = np.apply_along_axis(lambda col: rankdata(-col, method="average"), 0, filled)
    return ranks.mean(axis=1)


def sign_test(a: Sequence[float], b: Sequence[float]) -> dict:
    """One-sided paired sign test that ``a`` beats ``b``; ties are dropped."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    wins, losses = int(np.sum(diff > 0)), int(np.sum(diff < 0))
    n = wins + losses
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"wins": wins, "losses": losses, "ties": len(diff) - n, "p_value": float(p)}


def compare_tables(runs: Mapping[str, Mapping[int, Sequence[dict]]], budget: int, step: int):
    """Build trajectory rows, rank rows and sign tests from per-(algorithm, seed) event lists."""
    labels = list(runs)
    seeds = sorted(next(iter(runs.values())))
    for label in labels:
        if sorted(runs[label]) != seeds:
            raise ValueError(f"{label}: seeds {sorted(runs[label])} differ from {seeds}")
    grid = budget_grid(budget, step)
    curves = {
        label: np.array([incumbent_on_grid(runs[label][s], grid) for s in seeds]) for label in labels
    }  # (seeds, grid)
    trajectory, rank_rows = [], []
    for j, g in enumerate(grid):
        col = np.array([curves[label][:, j] for label in labels])  # (algorithms, seeds)
        mean_ranks = average_ranks(col)
        for a, label in enumerate(labels):
            vals = col[a][~np.isnan(col[a])]
            n = len(vals)
            mean = float(np.mean(vals)) if n else math.nan
            se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
            trajectory.append({"budget": g, "algorithm": label, "mean_score": mean, "stderr": se, "n_seeds": n})
            rank_rows.append({"budget": g, "algorithm": label, "mean_rank": float(mean_ranks[a])})
    tests = []
    if "pocaii" in labels:
        final = {label: curves[label][:, -1] for label in labels}
        for label in labels:
            if label != "pocaii":
                tests.append({"baseline": label, **sign_test(final["pocaii"], final[label])})
    return trajectory, rank_rows, tests


def _write_csv(path: Path, rows: list[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


def cmd_compare(cfg: ExperimentConfig, out: Optional[str] = None, worker_cmd: Optional[str] = None,
                parallel: int = 1, seeds: Optional[Sequence[int]] = None) -> dict:
    if len(cfg.algorithms) < 2:
        raise ConfigError("compare needs at least 2 algorithms")
    seeds = list(seeds or cfg.seeds)
    if len(seeds) < 2:
        raise ConfigError("compare needs at least 2 seeds")
    out_dir = Path(out or cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(dict(cfg.raw), a.label, s, str(out_dir), worker_cmd) for a in cfg.algorithms for s in seeds]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            paths = list(pool.map(_compare_job, jobs))
    else:
        paths = [_compare_job(j) for j in jobs]
    runs: dict[str, dict[int, list[dict]]] = {a.label: {} for a in cfg.algorithms}
    budgets = set()
    for (_, label, seed, _, _), path in zip(jobs, paths):
        header, events, _ = read_log(path)
        budgets.add(int(header["config"]["budget"]))
        runs[label][seed] = events
    if len(budgets) != 1:
        raise ConfigError(f"mismatched budgets across runs: {sorted(budgets)}")
    step = int(cfg.grid or _default_step(cfg))
    trajectory, ranks, tests = compare_tables(runs, cfg.budget, step)
    _write_csv(out_dir / "trajectory.csv", trajectory, ["budget", "algorithm", "mean_score", "stderr", "n_seeds"])
    _write_csv(out_dir / "ranks.csv", ranks, ["budget", "algorithm", "mean_rank"])
    if tests:
        _write_csv(out_dir / "sign_test.csv", tests, ["baseline", "wins", "losses", "ties", "p_value"])
    return {"trajectory": trajectory, "ranks": ranks, "sign_tests": tests, "logs": paths}


def _default_step(cfg: ExperimentConfig) -> int:
    for a in cfg.algorithms:
        if a.name == "pocaii":
            return int(a.params.get("delta", 5))
    return 5
