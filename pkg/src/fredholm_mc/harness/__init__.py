from fredholm_mc.harness.config import ConfigError, ExperimentConfig, ProblemSpec, load_config
from fredholm_mc.harness.runner import calibrate, compare_budgets, coverage_study, replay, run

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ProblemSpec",
    "calibrate",
    "compare_budgets",
    "coverage_study",
    "load_config",
    "replay",
    "run",
]
