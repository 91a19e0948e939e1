"""Configuration management for VL-Reader runs."""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import load_dotenv

from .models import RunConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "VLREADER_"


def load_overrides_from_env(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Collect VLREADER_<FIELD> variables; a .env file is honoured when present."""
    if environ is None:
        load_dotenv()
        environ = os.environ
    return {
        key[len(ENV_PREFIX):].lower(): value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX)
    }


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a flat JSON object of RunConfig fields."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must contain a JSON object")
    return data


def load_run_config(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Defaults, then the JSON file, then environment, then explicit overrides."""
    values: Dict[str, Any] = {}
    if config_file:
        values.update(load_config_file(config_file))
        logger.debug(f"Loaded config file {config_file}")
    values.update(load_overrides_from_env(environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the effective configuration as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return path
