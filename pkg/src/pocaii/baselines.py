"""Successive Halving, Hyperband and random search on the shared scheduler bookkeeping.

Hyperband bracket sizes follow ``n_s = eta**s * floor((s_max + 1) / (s + 1))``
for ``s = s_max, ..., 0``, with bracket ``s`` starting at ``beta_max / eta**s``.
Budgets are charged in full at every rung (retraining from scratch) unless
``resume=True``, in which case promotions only pay the increment. With
``B=800, delta_min=5, beta_max=20, eta=2`` this gives brackets of 4, 2 and 3
configurations costing 160 per hyperband: five hyperbands, 45 configurations.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from pocaii.core import RunReport, Scheduler, TrialEvent, TrialRecord
from pocaii.objective import ObjectiveRunner
from pocaii.space import SearchSpace


@dataclass(frozen=True)
class ShBracket:
    n: int
    delta_start: int
    eta: float
    rungs: tuple[tuple[int, int], ...]  # (config count, per-config budget)

    def cost(self, resume: bool) -> int:
        total, prev = 0, 0
        for count, budget in self.rungs:
            total += count * (budget - prev if resume else budget)
            prev = budget
        return total


def _round_budget(x: float, m: int) -> int:
    return max(m, int(round(x / m)) * m)


def sh_rungs(n: int, delta_start: int, eta: float, beta_max: int, m: int = 1) -> tuple[tuple[int, int], ...]:
    """Rung geometry: budgets ``delta_start * eta**r`` up to ``beta_max``, counts ``ceil(c / eta)``."""
    rungs = []
    count, r = n, 0
    while True:
        budget = _round_budget(delta_start * eta**r, m)
        if budget > beta_max and rungs:
            break
        rungs.append((count, budget))
        if budget >= beta_max:
            break
        count = max(1, math.ceil(count / eta))
        r += 1
    return tuple(rungs)


@dataclass(frozen=True)
class HyperbandSchedule:
    beta_max: int
    delta_min: int
    eta: float
    resume: bool
    brackets: tuple[ShBracket, ...]  # one hyperband, most aggressive bracket first
    n_hyperbands: int
    tail: tuple[ShBracket, ...]  # brackets of a final partial hyperband that still fit

    @property
    def n_brackets(self) -> int:
        return len(self.brackets)

    @property
    def hyperband_cost(self) -> int:
        return sum(b.cost(self.resume) for b in self.brackets)

    @property
    def hyperband_configs(self) -> int:
        return sum(b.n for b in self.brackets)

    @property
    def total_configs(self) -> int:
        return self.n_hyperbands * self.hyperband_configs + sum(b.n for b in self.tail)

    @property
    def total_cost(self) -> int:
        return self.n_hyperbands * self.hyperband_cost + sum(b.cost(self.resume) for b in self.tail)

    def planned_brackets(self) -> list[ShBracket]:
        return list(self.brackets) * self.n_hyperbands + list(self.tail)


def hyperband_schedule(
    budget: int, delta_min: int, beta_max: int, eta: float = 2.0, resume: bool = False, m: int = 1
) -> HyperbandSchedule:
    if not eta > 1:
        raise ValueError(f"eta must exceed 1, got {eta}")
    if not 0 < delta_min <= beta_max:
        raise ValueError(f"need 0 < delta_min <= beta_max, got {delta_min}, {beta_max}")
    s_max = int(math.floor(math.log(beta_max / delta_min, eta) + 1e-9))
    brackets = []
    for s in range(s_max, -1, -1):
        n = int(math.floor(eta**s + 1e-9)) * ((s_max + 1) // (s + 1))
        start = _round_budget(beta_max / eta**s, m)
        brackets.append(ShBracket(n, start, eta, sh_rungs(n, start, eta, beta_max, m)))
    costs = [b.cost(resume) for b in brackets]
    if budget < min(costs):
        raise ValueError(f"infeasible budget: B={budget} below the cheapest bracket cost {min(costs)}")
    per_hb = sum(costs)
    n_hb = budget // per_hb
    left = budget - n_hb * per_hb
    tail = []
    for b, c in zip(brackets, costs):
        if c > left:
            break
        tail.append(b)
        left -= c
    return HyperbandSchedule(beta_max, delta_min, eta, resume, tuple(brackets), n_hb, tuple(tail))


def _rank(trials: Sequence[TrialRecord]) -> list[TrialRecord]:
    return sorted(trials, key=lambda t: (-t.score, t.id))


class BaselineScheduler(Scheduler):
    def successive_halving(
        self,
        trials: Sequence[TrialRecord],
        delta_start: int,
        eta: float,
        beta_max: int,
        resume: bool = True,
    ) -> list[TrialRecord]:
        """Train, keep the top ``ceil(count / eta)``, repeat at ``eta`` times the budget.

        A rung that no longer fits in the remaining budget is not started; the
        ranking of the last completed rung is returned.
        """
        if not trials:
            raise ValueError("successive halving needs at least one configuration")
        if delta_start < self.m:
            raise ValueError(f"delta_start={delta_start} below measurement interval {self.m}")
        rungs = sh_rungs(len(trials), delta_start, eta, beta_max, self.m)
        alive = list(trials)
        ranked = alive
        for i, (count, budget) in enumerate(rungs):
            alive = ranked[:count]
            jobs = [(t, budget - t.budget if resume else budget) for t in alive if not t.failed]
            if sum(a for _, a in jobs) > self.ledger.remaining:
                break
            self.train(jobs, "trained", fresh=not resume)
            ranked = _rank(alive)
        return ranked


class SuccessiveHalving(BaselineScheduler):
    algorithm = "successive-halving"

    def __init__(self, space, objective, budget, n, delta_start, eta=2.0, beta_max=None,
                 resume=True, m=1, seed=0, on_event=None, executor=None):
        super().__init__(space, objective, budget, m, seed, on_event, executor)
        self.n, self.delta_start, self.eta = n, delta_start, eta
        self.beta_max = beta_max if beta_max is not None else budget
        self.resume = resume

    def run(self) -> RunReport:
        trials = [self.add_trial(self.sample_config()) for _ in range(self.n)]
        self.successive_halving(trials, self.delta_start, self.eta, self.beta_max, self.resume)
        return self.report()


class Hyperband(BaselineScheduler):
    algorithm = "hyperband"

    def __init__(self, space, objective, budget, delta_min, beta_max, eta=2.0, resume=False,
                 m=1, seed=0, on_event=None, executor=None):
        super().__init__(space, objective, budget, m, seed, on_event, executor)
        self.schedule = hyperband_schedule(budget, delta_min, beta_max, eta, resume, m)

    def run(self) -> RunReport:
        sched = self.schedule
        for bracket in sched.planned_brackets():
            trials = [self.add_trial(self.sample_config()) for _ in range(bracket.n)]
            self.successive_halving(trials, bracket.delta_start, sched.eta, sched.beta_max, sched.resume)
            self.k += 1
        return self.report(iterations=self.k - 1, search_configs=len(self.trials))


class RandomSearch(BaselineScheduler):
    algorithm = "random"

    def __init__(self, space, objective, budget, delta_eval, m=1, seed=0, on_event=None,
                 executor=None, batch=1):
        super().__init__(space, objective, budget, m, seed, on_event, executor)
        if budget < delta_eval:
            raise ValueError(f"infeasible budget: B={budget} < delta_eval={delta_eval}")
        self.delta_eval = delta_eval
        self.batch = batch

    def run(self) -> RunReport:
        while self.ledger.remaining >= self.delta_eval:
            n = min(self.batch, self.ledger.remaining // self.delta_eval)
            trials = [self.add_trial(self.sample_config()) for _ in range(n)]
            self.train([(t, self.delta_eval) for t in trials], "trained")
        return self.report(search_configs=len(self.trials))


def successive_halving(
    configs_or_n, delta_start: int, eta: float, objective: ObjectiveRunner, budget: int,
    space: SearchSpace, beta_max: Optional[int] = None, resume: bool = True, seed: int = 0, m: int = 1,
    on_event: Optional[Callable[[TrialEvent], None]] = None,
) -> tuple[list[TrialRecord], RunReport]:
    """One SH bracket over ``configs_or_n`` (a count of uniform draws or explicit configurations)."""
    sh = SuccessiveHalving(space, objective, budget, 0, delta_start, eta, beta_max, resume, m, seed, on_event)
    if isinstance(configs_or_n, int):
        configs = [sh.sample_config() for _ in range(configs_or_n)]
    else:
        configs = list(configs_or_n)
    trials = [sh.add_trial(c) for c in configs]
    ranked = sh.successive_halving(trials, delta_start, eta, sh.beta_max, resume)
    return ranked, sh.report()


def hyperband(space, objective, budget, delta_min, beta_max, eta=2.0, resume=False, seed=0,
              m=1, on_event=None, executor=None) -> RunReport:
    return Hyperband(space, objective, budget, delta_min, beta_max, eta, resume, m, seed,
                     on_event, executor).run()


def random_search(space, objective, budget, delta_eval, seed=0, m=1, on_event=None,
                  executor=None) -> RunReport:
    return RandomSearch(space, objective, budget, delta_eval, m, seed, on_event, executor).run()
