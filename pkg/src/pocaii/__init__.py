"""Multi-fidelity hyperparameter optimization with forecast-driven budget allocation."""

from pocaii.space import (
    Categorical,
    Configuration,
    Continuous,
    Integer,
    SearchSpace,
    SpaceError,
)
from pocaii.core import (
    BudgetLedger,
    PocaiiParams,
    PocaiiOptimizer,
    RunReport,
    TrialRecord,
    run,
)

__all__ = [
    "BudgetLedger",
    "Categorical",
    "Configuration",
    "Continuous",
    "Integer",
    "PocaiiOptimizer",
    "PocaiiParams",
    "RunReport",
    "SearchSpace",
    "SpaceError",
    "TrialRecord",
    "run",
]

__version__ = "0.1.0"
