"""
Runtime settings, logging setup and experiment config files
"""

import json
import logging
import os
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from errors import ConfigError, DataError
from schemas import ExperimentConfig

# Process settings
REGISTRY_URL = os.getenv("RADARHD_REGISTRY_URL", "sqlite:///./radarhd_runs.db")
CHECKPOINT_PATH = os.getenv("RADARHD_CHECKPOINT")
LOG_LEVEL = os.getenv("RADARHD_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install one stream handler on the root logger"""
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT, force=True)


def load_experiment_config(path: Optional[str | Path]) -> ExperimentConfig:
    """Read a JSON config file; no path means the toy defaults"""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


def dump_experiment_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
