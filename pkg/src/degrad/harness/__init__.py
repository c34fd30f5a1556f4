"""Experiment configuration, Monte Carlo orchestration, reports and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config, load_schema, parse_config, validate_config
from .demos import DEMOS, DemoResult, run_demo
from .experiment import (
    ComparisonReport,
    ExperimentResult,
    SweepResult,
    assemble_bounds,
    compare,
    run_experiment,
    run_sweep,
    sweep_cells,
    thread_count,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "load_schema",
    "parse_config",
    "validate_config",
    "DEMOS",
    "DemoResult",
    "run_demo",
    "ComparisonReport",
    "ExperimentResult",
    "SweepResult",
    "assemble_bounds",
    "compare",
    "run_experiment",
    "run_sweep",
    "sweep_cells",
    "thread_count",
]
