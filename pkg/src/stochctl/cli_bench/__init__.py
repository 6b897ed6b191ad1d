"""Experiment configs, pipelines, CSV emission and the command line."""
from .configs import CONFIGS, config_hash, load_config
from .emit import read_csv, write_csv
from .runner import RunReport, StageError, run

__all__ = ["CONFIGS", "config_hash", "load_config", "read_csv", "write_csv", "RunReport", "StageError", "run"]
