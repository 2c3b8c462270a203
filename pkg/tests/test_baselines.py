from __future__ import annotations

import numpy as np
import pytest

from pocaii.baselines import (
    Hyperband,
    RandomSearch,
    hyperband,
    hyperband_schedule,
    random_search,
    sh_rungs,
    successive_halving,
)
from pocaii.objective import FunctionRunner, SyntheticRunner, reference_space
from pocaii.space import Configuration

SPACE = reference_space()


def _quality(params, budget):
    """Deterministic: better x1 is better at every budget, curves rise with budget."""
    return params["x1"] * (1 - np.exp(-budget / 10))


def test_sh_example_spend_both_accountings():
    assert sh_rungs(4, 5, 2, 20) == ((4, 5), (2, 10), (1, 20))
    _, rep = successive_halving(4, 5, 2, FunctionRunner(_quality), 1000, SPACE, beta_max=20, resume=True)
    assert rep.spent == 4 * 5 + 2 * 5 + 1 * 10
    _, rep = successive_halving(4, 5, 2, FunctionRunner(_quality), 1000, SPACE, beta_max=20, resume=False)
    assert rep.spent == 4 * 5 + 2 * 10 + 1 * 20


def test_sh_single_config_goes_to_beta_max():
    ranked, rep = successive_halving(1, 5, 2, FunctionRunner(_quality), 1000, SPACE, beta_max=20)
    assert ranked[0].budget == 20 and rep.spent == 20


def test_sh_ceiling_promotions():
    assert [c for c, _ in sh_rungs(3, 5, 2, 20)] == [3, 2, 1]


def test_sh_survivor_is_argmax():
    rng = np.random.default_rng(0)
    for _ in range(10):
        configs = [Configuration((float(x), 0.5, 0), i) for i, x in enumerate(rng.uniform(size=8))]
        ranked, _ = successive_halving(configs, 5, 2, FunctionRunner(_quality), 1000, SPACE, beta_max=40)
        best = max(configs, key=lambda c: c.values[0])
        assert ranked[0].id == best.id


def test_sh_ties_promote_lower_id():
    configs = [Configuration((0.5, 0.5, 0), i) for i in range(4)]
    ranked, _ = successive_halving(configs, 5, 2, FunctionRunner(_quality), 1000, SPACE, beta_max=10)
    assert [t.id for t in ranked] == [0, 1]


def test_sh_skips_unaffordable_rung():
    ranked, rep = successive_halving(4, 5, 2, FunctionRunner(_quality), 25, SPACE, beta_max=20)
    assert rep.spent == 20  # rung 2 would need 10 more but only 5 remain
    assert all(t.budget == 5 for t in ranked)


def test_hyperband_schedule_example():
    s = hyperband_schedule(800, 5, 20, 2)
    assert s.n_hyperbands == 5
    assert s.total_configs == 45
    assert s.hyperband_configs == 9
    assert [b.n for b in s.brackets] == [4, 2, 3]
    assert s.total_cost <= 800


def test_hyperband_degenerate_range_is_random_search():
    s = hyperband_schedule(100, 20, 20, 2)
    assert len(s.brackets) == 1 and s.brackets[0].rungs == ((1, 20),)


def test_hyperband_infeasible():
    with pytest.raises(ValueError, match="infeasible budget"):
        hyperband_schedule(30, 5, 20, 2)


def test_hyperband_run_matches_schedule():
    events = []
    rep = Hyperband(SPACE, FunctionRunner(_quality), 800, 5, 20, on_event=events.append).run()
    assert len(rep.trials) == 45
    assert rep.spent == 800
    assert all(e.spent <= 800 for e in events)


def test_random_search_counts():
    rep = random_search(SPACE, SyntheticRunner(), 100, 5)
    assert len(rep.trials) == 20 and rep.spent == 100
    with pytest.raises(ValueError, match="infeasible budget"):
        random_search(SPACE, SyntheticRunner(), 3, 5)


def test_random_search_deterministic_and_monotone():
    a = random_search(SPACE, SyntheticRunner(), 200, 10, seed=3)
    b = random_search(SPACE, SyntheticRunner(), 200, 10, seed=3)
    assert a.trajectory == b.trajectory
    inc = [s for _, s in a.trajectory]
    assert inc == sorted(inc)


def test_random_search_batched_execution():
    from concurrent.futures import ThreadPoolExecutor

    seq = random_search(SPACE, SyntheticRunner(), 200, 10, seed=1)
    with ThreadPoolExecutor(3) as pool:
        par = RandomSearch(SPACE, SyntheticRunner(), 200, 10, seed=1, executor=pool, batch=4).run()
    assert [t.config.values for t in seq.trials] == [t.config.values for t in par.trials]
    assert seq.incumbent_score == par.incumbent_score


def test_hyperband_report_counts():
    rep = hyperband(SPACE, FunctionRunner(_quality), 800, 5, 20)
    assert rep.search_configs == 45
