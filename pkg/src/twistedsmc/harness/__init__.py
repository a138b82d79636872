"""Experiment orchestration and command line interface."""

from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .experiments import (
    RECORD_COLUMNS,
    build_model,
    learn_schedule,
    read_records,
    records_to_csv,
    reference_log_z,
    run_experiment,
    run_repetition,
    size_baselines,
)
from .summarize import quantile, summarize
