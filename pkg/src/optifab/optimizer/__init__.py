"""Multi-objective optimization engine (Bayesian and genetic strategies)."""

from optifab.optimizer.acquisition import acquire, expected_improvement, maximize_ei, scalarize
from optifab.optimizer.core import (
    DesignSpace,
    Optimizer,
    OptimizerConfig,
    OptimizerError,
    TrialRecord,
    refit_interval,
)
from optifab.optimizer.gp import GP, GPParams, fit_gp, predict
from optifab.optimizer.nsga2 import crowding_distance, fast_non_dominated_sort, mogo_step, survival_select

__all__ = [
    "GP", "GPParams", "DesignSpace", "Optimizer", "OptimizerConfig", "OptimizerError", "TrialRecord",
    "acquire", "crowding_distance", "expected_improvement", "fast_non_dominated_sort", "fit_gp",
    "maximize_ei", "mogo_step", "predict", "refit_interval", "scalarize", "survival_select",
]
