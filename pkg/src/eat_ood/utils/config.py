import json
import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from eat_ood.config.config import ExperimentConfig
from eat_ood.errors import ConfigurationError, DataParseError, MissingFileError

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "EAT_OOD_OUTPUT_ROOT"


def output_root() -> Optional[str]:
    """Default output root from the environment (``.env`` included)."""
    load_dotenv()
    return os.getenv(OUTPUT_ROOT_ENV) or None


def load_config(config_path: Optional[str] = None) -> ExperimentConfig:
    """Load an experiment configuration from a JSON file.

    Without a path the built-in defaults are used. A relative
    ``output_dir`` is placed under ``$EAT_OOD_OUTPUT_ROOT`` when it is set.
    """
    if config_path is None:
        raw = {}
        logger.info("No config file given, using defaults")
    else:
        if not os.path.exists(config_path):
            raise MissingFileError(f"Config file not found: {config_path}")
        with open(config_path, "r") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise DataParseError(f"invalid JSON: {e.msg}", path=config_path, line=e.lineno) from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{config_path}: top level must be an object")
        logger.info(f"Loaded config from {config_path}")

    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e

    root = output_root()
    if root and not Path(config.output_dir).is_absolute():
        config = config.model_copy(update={"output_dir": str(Path(root) / config.output_dir)})
    return config


def save_config(config: ExperimentConfig, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(config.model_dump_json(indent=4))
