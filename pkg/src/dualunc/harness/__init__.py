"""Experiment orchestration: config files, run directories and the command line."""

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .runs import RunRecord, cmd_evaluate, cmd_gradcheck, cmd_prepare, cmd_report, cmd_train

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunRecord",
    "cmd_evaluate",
    "cmd_gradcheck",
    "cmd_prepare",
    "cmd_report",
    "cmd_train",
    "dump_config",
    "load_config",
    "parse_config",
]
