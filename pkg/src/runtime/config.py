"""
Run Configuration
=================
Loads the YAML run configuration into a validated ``RunConfig`` and applies
command-line overrides.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import torch
import yaml
from pydantic import ValidationError

from general.errors import ConfigurationError, StorageError
from general.models import RunConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "CHORUS_THREADS"


def _dotted(loc) -> str:
    return ".".join(str(part) for part in loc)


class ConfigManager:
    """Reads, validates and overrides the run configuration file."""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = Path(config_file) if config_file else None

    def load_raw(self) -> Dict[str, Any]:
        """YAML document as a dict (empty when no file is configured)."""
        if self.config_file is None:
            return {}
        if not self.config_file.exists():
            raise StorageError(f"config file not found: {self.config_file}")
        try:
            with open(self.config_file, "r") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"invalid YAML in {self.config_file}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError("top level of the config must be a mapping")
        return data

    def load(self, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        """Validated config; ``overrides`` map dotted keys to values."""
        data = self.load_raw()
        for key, value in (overrides or {}).items():
            if value is not None:
                set_dotted(data, key, value)
        return validate_config(data)


def set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError("cannot override inside a non-mapping", key=key)
    node[parts[-1]] = value


def validate_config(data: Dict[str, Any]) -> RunConfig:
    """RunConfig from a dict; the first validation error names its dotted key."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigurationError(first["msg"], key=_dotted(first["loc"]) or "config") from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    return ConfigManager(path).load(overrides)


def thread_cap() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"must be an integer, got '{raw}'", key=THREADS_ENV) from e
    if value <= 0:
        raise ConfigurationError(f"must be positive, got {value}", key=THREADS_ENV)
    return value


def apply_runtime(config: RunConfig) -> RunConfig:
    """Single-threaded torch per job; CHORUS_THREADS caps experiment workers."""
    cap = thread_cap()
    torch.set_num_threads(1)
    if cap is not None and config.experiment.workers > cap:
        logger.info(f"{THREADS_ENV}={cap}: capping experiment workers at {cap}")
        experiment = config.experiment.model_copy(update={"workers": cap})
        config = config.model_copy(update={"experiment": experiment})
    return config
