"""The POCAII scheduler.

Each iteration ``k`` runs a search phase (new configurations trained to the
minimum increment ``delta``, drawn uniformly or by TPE) followed by an
evaluation phase (up to ``E(k)`` extra ``delta`` increments given to existing
configurations whose ARIMA forecast clears the ``alpha`` improvement test,
chosen with probability proportional to expected improvement). Whatever the
main loop cannot spend is flushed proportionally to expected improvement.

Scores are maximized; pass ``-loss`` for loss-type objectives.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erfcx

from pocaii.arima import ArimaOrder, Forecast, LossSeries, fit_or_fallback, forecast
from pocaii.objective import EvaluationRequest, ObjectiveError, ObjectiveRunner, evaluate
from pocaii.space import Configuration, SearchSpace, sample_uniform, validate
from pocaii.tpe import TpeParams, propose

logger = logging.getLogger(__name__)

_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear_schedule(k: int) -> int:
    """Default evaluation count ``E(k) = k``."""
    return k


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class BudgetLedger:
    total: int
    spent: int = 0

    @property
    def remaining(self) -> int:
        return self.total - self.spent

    def debit(self, amount: int) -> None:
        if amount < 0:
            raise ValueError(f"negative debit {amount}")
        if amount > self.remaining:
            raise BudgetExceeded(f"debit {amount} exceeds remaining budget {self.remaining}")
        self.spent += amount


@dataclass
class TrialRecord:
    config: Configuration
    series: LossSeries
    checkpoint: Optional[str] = None
    failed: bool = False
    debited: int = 0
    n_selected: int = 0

    @property
    def id(self) -> int:
        return self.config.id

    @property
    def budget(self) -> int:
        return self.series.m * len(self.series)

    @property
    def score(self) -> float:
        if self.failed or not len(self.series):
            return -math.inf
        return self.series.last

    @property
    def active(self) -> bool:
        return not self.failed and len(self.series) > 0


@dataclass(frozen=True)
class TrialEvent:
    """Emitted after every budget debit."""

    algorithm: str
    event: str  # sampled | trained | selected | flushed | failed
    config_id: int
    params: dict
    start: int
    end: int
    debited: int
    spent: int
    score: float
    incumbent: float
    measurements: list
    checkpoint: Optional[str]
    error: Optional[str] = None
    iteration: int = 0


@dataclass
class RunReport:
    algorithm: str
    budget: int
    trials: list[TrialRecord]
    trajectory: list[tuple[int, float]]  # (cumulative spent, incumbent score) after each debit
    spent: int
    incumbent_id: Optional[int]
    incumbent_score: float
    iterations: int = 0
    search_configs: int = 0
    spend: dict = field(default_factory=dict)

    def incumbent_config(self) -> Optional[Configuration]:
        for t in self.trials:
            if t.id == self.incumbent_id:
                return t.config
        return None


@dataclass(frozen=True)
class PocaiiParams:
    budget: int
    delta: int = 5
    m: int = 1
    n_search: int = 5
    epsilon: float = 0.05
    alpha: float = 1.05
    tpe: TpeParams = TpeParams()
    order: ArimaOrder = ArimaOrder(3, 1, 0)
    eval_count: Callable[[int], int] = linear_schedule
    delta_schedule: Optional[Callable[[int], int]] = None
    uniform_mix: bool = False

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"measurement interval m must be >= 1, got {self.m}")
        if self.delta < self.m or self.delta % self.m:
            raise ValueError(f"delta={self.delta} must be a positive multiple of m={self.m}")
        if self.budget < self.delta:
            raise ValueError(f"infeasible budget: B={self.budget} < delta={self.delta}")
        if self.n_search < 1:
            raise ValueError("n_search must be positive")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ValueError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        if not self.alpha > 1.0:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")

    def delta_at(self, k: int) -> int:
        if self.delta_schedule is None:
            return self.delta
        d = int(self.delta_schedule(k))
        if d < self.m or d % self.m:
            raise ValueError(f"delta schedule gave {d} at k={k}; must be a positive multiple of m")
        return d


def tpe_probability(remaining: float, total: float, epsilon: float) -> float:
    """Probability of using TPE: rises linearly from 0.5 to ``1 - epsilon`` as budget runs out."""
    return min(1.0 - epsilon, 1.0 - 0.5 * remaining / total)


def is_improving(predicted: float, current: float, alpha: float) -> bool:
    """Relative improvement test, valid for scores of either sign."""
    return predicted > current and predicted - current >= (alpha - 1.0) * abs(current)


def expected_improvement(fc: Forecast, s_star: float) -> float:
    """``E[max(S - s_star, 0)]`` for ``S ~ Normal(fc.mean, fc.variance)``."""
    sigma = math.sqrt(fc.variance)
    if not math.isfinite(s_star):
        return math.inf if s_star < 0 else 0.0
    z = (fc.mean - s_star) / sigma
    if z >= 0:
        cdf = 0.5 * math.erfc(-z / math.sqrt(2.0))
        return sigma * (_INV_SQRT_2PI * math.exp(-0.5 * z * z) + z * cdf)
    # Phi(z)/phi(z) via the scaled complementary error function keeps the deep tail accurate
    ratio = _SQRT_HALF_PI * float(erfcx(-z / math.sqrt(2.0)))
    return max(sigma * _INV_SQRT_2PI * math.exp(-0.5 * z * z) * (1.0 + z * ratio), 0.0)


def selection_probabilities(
    ei: dict[int, float], active_ids: Optional[Sequence[int]] = None
) -> dict[int, float]:
    """Re-selection probabilities proportional to expected improvement.

    When ``active_ids`` is given and holds at least 3 trials, each of them also
    gets ``1 / (|S| log |S|)``, paid for by scaling the EI shares down.
    """
    total = sum(ei.values())
    if not ei or not total > 0:
        raise ValueError("no positive expected improvement")
    if math.isinf(total):
        inf_ids = [i for i, v in ei.items() if math.isinf(v)]
        probs = {i: (1.0 / len(inf_ids) if i in inf_ids else 0.0) for i in ei}
    else:
        probs = {i: v / total for i, v in ei.items()}
    if active_ids is not None and len(active_ids) >= 3:
        n = len(active_ids)
        u = 1.0 / (n * math.log(n))
        scale = 1.0 - n * u
        mixed = {i: scale * p for i, p in probs.items()}
        for i in active_ids:
            mixed[i] = mixed.get(i, 0.0) + u
        probs = mixed
    return probs


def largest_remainder(units: int, weights: dict[int, float]) -> dict[int, int]:
    """Split ``units`` integer units proportionally; ties go to the lower id."""
    total = sum(weights.values())
    quotas = {i: units * w / total for i, w in weights.items()}
    alloc = {i: int(math.floor(q)) for i, q in quotas.items()}
    left = units - sum(alloc.values())
    order = sorted(quotas, key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:left]:
        alloc[i] += 1
    return alloc


class Scheduler:
    """Shared trial/ledger/incumbent bookkeeping for POCAII and the baselines."""

    algorithm = "base"

    def __init__(
        self,
        space: SearchSpace,
        objective: ObjectiveRunner,
        budget: int,
        m: int,
        seed: int = 0,
        on_event: Optional[Callable[[TrialEvent], None]] = None,
        executor: Optional[Executor] = None,
    ):
        validate(space)
        self.space = space
        self.objective = objective
        self.m = m
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.ledger = BudgetLedger(budget)
        self.trials: dict[int, TrialRecord] = {}
        self.incumbent_id: Optional[int] = None
        self.incumbent_score = -math.inf
        self.trajectory: list[tuple[int, float]] = []
        self.on_event = on_event
        self.executor = executor
        self.k = 1
        self._next_id = 0

    def new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def add_trial(self, config: Configuration) -> TrialRecord:
        if config.id in self.trials:
            raise ValueError(f"trial id {config.id} reused")
        trial = TrialRecord(config, LossSeries(self.m))
        self.trials[config.id] = trial
        return trial

    def sample_config(self) -> Configuration:
        return sample_uniform(self.space, self.rng, self.new_id())

    def observations(self) -> list[tuple[Configuration, float]]:
        return [(t.config, t.score) for t in self.trials.values() if t.active]

    def _request(self, trial: TrialRecord, amount: int) -> EvaluationRequest:
        return EvaluationRequest(
            config_id=trial.id,
            params=trial.config.as_dict(self.space),
            start=trial.budget,
            end=trial.budget + amount,
            interval=self.m,
            checkpoint=trial.checkpoint,
        )

    def _call(self, request: EvaluationRequest):
        try:
            return evaluate(self.objective, request), None
        except ObjectiveError as exc:
            return None, str(exc)

    def train(
        self, jobs: Iterable[tuple[TrialRecord, int]], event: str, fresh: bool = False
    ) -> list[bool]:
        """Give each trial its extra budget; results are merged in ascending id order.

        With ``fresh`` the trials restart from budget 0 (their series is
        discarded) instead of resuming from their checkpoint. Requests are
        dispatched concurrently when an executor is configured.
        """
        jobs = sorted(jobs, key=lambda j: j[0].id)
        if fresh:
            for trial, _ in jobs:
                trial.series = LossSeries(self.m)
                trial.checkpoint = None
        requests = [self._request(t, a) for t, a in jobs]
        if self.executor is not None and len(requests) > 1:
            results = list(self.executor.map(self._call, requests))
        else:
            results = [self._call(r) for r in requests]
        ok = []
        for (trial, amount), request, (batch, error) in zip(jobs, requests, results):
            self.ledger.debit(amount)
            trial.debited += amount
            if batch is None:
                trial.failed = True
                logger.warning("trial %d failed: %s", trial.id, error)
            else:
                for b, s in batch.measurements:
                    trial.series.append(b, s)
                trial.checkpoint = batch.checkpoint
                if trial.score > self.incumbent_score:
                    self.incumbent_id, self.incumbent_score = trial.id, trial.score
            self.trajectory.append((self.ledger.spent, self.incumbent_score))
            if self.on_event is not None:
                self.on_event(
                    TrialEvent(
                        algorithm=self.algorithm,
                        event="failed" if batch is None else event,
                        config_id=trial.id,
                        params=request.params,
                        start=request.start,
                        end=request.end,
                        debited=amount,
                        spent=self.ledger.spent,
                        score=trial.score,
                        incumbent=self.incumbent_score,
                        measurements=[] if batch is None else [list(x) for x in batch.measurements],
                        checkpoint=None if batch is None else batch.checkpoint,
                        error=error,
                        iteration=self.k,
                    )
                )
            ok.append(batch is not None)
        return ok

    def report(self, **extra) -> RunReport:
        return RunReport(
            algorithm=self.algorithm,
            budget=self.ledger.total,
            trials=list(self.trials.values()),
            trajectory=list(self.trajectory),
            spent=self.ledger.spent,
            incumbent_id=self.incumbent_id,
            incumbent_score=self.incumbent_score,
            **extra,
        )


class PocaiiOptimizer(Scheduler):
    algorithm = "pocaii"

    def __init__(
        self,
        params: PocaiiParams,
        space: SearchSpace,
        objective: ObjectiveRunner,
        seed: int = 0,
        on_event: Optional[Callable[[TrialEvent], None]] = None,
        executor: Optional[Executor] = None,
    ):
        super().__init__(space, objective, params.budget, params.m, seed, on_event, executor)
        self.params = params
        self.iterations = 0
        self.search_configs = 0
        self.spend = {"search": 0, "evaluation": 0, "flush": 0}
        self._forecasts: dict[tuple[int, int, int], Forecast] = {}

    # -- forecasting -------------------------------------------------------

    def forecast_for(self, trial: TrialRecord, h: int) -> Forecast:
        key = (trial.id, len(trial.series), h)
        fc = self._forecasts.get(key)
        if fc is None:
            fc = forecast(fit_or_fallback(trial.series, self.params.order), h)
            self._forecasts[key] = fc
        return fc

    def improving_set(self) -> dict[int, Forecast]:
        """Active trials whose forecast one increment ahead clears the alpha test."""
        h = self.params.delta_at(self.k) // self.m
        out = {}
        for trial in self.trials.values():
            if not trial.active:
                continue
            fc = self.forecast_for(trial, h)
            if is_improving(fc.mean, trial.score, self.params.alpha):
                out[trial.id] = fc
        return out

    # -- phases ------------------------------------------------------------

    def search_phase(self, n: Optional[int] = None) -> int:
        """Sample up to ``n`` configurations and train each for ``delta``.

        All draws happen before any training call, against the history at
        phase start. Returns the number of configurations sampled.
        """
        p = self.params
        n = p.n_search if n is None else n
        delta = p.delta_at(self.k)
        history = self.observations()
        remaining = self.ledger.remaining
        planned = []
        for _ in range(n):
            if remaining < delta:
                break
            q = tpe_probability(remaining, p.budget, p.epsilon)
            v = self.rng.uniform()
            if len(history) <= self.space.d + 1 or v > q:
                config = self.sample_config()
            else:
                config = propose(history, self.space, p.tpe, self.rng, self.new_id())
            planned.append(config)
            remaining -= delta
        trials = [self.add_trial(c) for c in planned]
        self.train([(t, delta) for t in trials], "sampled")
        self.search_configs += len(trials)
        self.spend["search"] += delta * len(trials)
        return len(trials)

    def evaluation_phase(self) -> int:
        """Spend up to ``E(k)`` increments on improving trials; returns selections made."""
        p = self.params
        delta = p.delta_at(self.k)
        h = delta // self.m
        gamma = self.improving_set()
        ei = {i: expected_improvement(fc, self.incumbent_score) for i, fc in gamma.items()}
        if not any(v > 0 for v in ei.values()):
            self.search_phase(n=p.eval_count(self.k))
            return 0
        made = 0
        for _ in range(p.eval_count(self.k)):
            if self.ledger.remaining < delta or not any(v > 0 for v in ei.values()):
                break
            active = [t.id for t in self.trials.values() if t.active] if p.uniform_mix else None
            probs = selection_probabilities(ei, active)
            ids = sorted(probs)
            weights = np.array([probs[i] for i in ids])
            pick = ids[int(self.rng.choice(len(ids), p=weights / weights.sum()))]
            trial = self.trials[pick]
            trial.n_selected += 1
            self.train([(trial, delta)], "selected")
            self.spend["evaluation"] += delta
            made += 1
            if pick in gamma:
                fc = self.forecast_for(trial, h) if trial.active else None
                if fc is None or not is_improving(fc.mean, trial.score, p.alpha):
                    del gamma[pick]
                else:
                    gamma[pick] = fc
            ei = {i: expected_improvement(fc, self.incumbent_score) for i, fc in gamma.items()}
        return made

    def final_flush(self) -> None:
        """Spend the leftover budget in m-unit steps, proportionally to expected improvement."""
        units = self.ledger.remaining // self.m
        if units == 0:
            return
        gamma = self.improving_set()
        ei = {i: expected_improvement(fc, self.incumbent_score) for i, fc in gamma.items()}
        ei = {i: v for i, v in ei.items() if v > 0}
        if ei:
            if any(math.isinf(v) for v in ei.values()):
                ei = {i: 1.0 for i, v in ei.items() if math.isinf(v)}
            alloc = largest_remainder(units, ei)
        elif self.incumbent_id is not None:
            alloc = {self.incumbent_id: units}
        else:
            return
        jobs = [(self.trials[i], n * self.m) for i, n in sorted(alloc.items()) if n > 0]
        self.train(jobs, "flushed")
        self.spend["flush"] += sum(a for _, a in jobs)

    def iteration_cost(self) -> int:
        p = self.params
        return (p.n_search + p.eval_count(self.k)) * p.delta_at(self.k)

    def step(self) -> None:
        self.search_phase()
        self.evaluation_phase()
        self.iterations += 1
        self.k += 1

    def run(self) -> RunReport:
        """Iterate while a full search + evaluation allotment fits, then flush the rest."""
        while self.ledger.remaining >= self.iteration_cost() or (
            self.k == 1 and self.ledger.remaining >= self.params.delta_at(1)
        ):
            self.step()
        self.final_flush()
        return self.report(
            iterations=self.iterations, search_configs=self.search_configs, spend=dict(self.spend)
        )


def run(
    params: PocaiiParams,
    space: SearchSpace,
    objective: ObjectiveRunner,
    seed: int = 0,
    on_event: Optional[Callable[[TrialEvent], None]] = None,
    executor: Optional[Executor] = None,
) -> RunReport:
    return PocaiiOptimizer(params, space, objective, seed, on_event, executor).run()
