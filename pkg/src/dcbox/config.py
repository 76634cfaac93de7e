"""
Configuration management for dcbox
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import (
    ConfigError,
    IncompatibleConfigError,
    InvalidConfigValueError,
    MissingConfigKeyError,
    UnknownConfigKeyError,
)
from .models import RunConfig
from .presets import get_preset


LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class Settings(BaseSettings):
    """Process-wide settings, read from DCBOX_* environment variables or .env"""

    # Logging
    log_level: str = "INFO"

    # Storage
    output_dir: Path = Path("./runs")
    mnist_dir: Optional[Path] = None  # enables the MNIST trend test

    model_config = SettingsConfigDict(
        env_prefix="DCBOX_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


# Global settings instance
settings = Settings()


def configure_logging(level: Optional[str] = None):
    """Root logging setup for command-line use"""
    level = (level or settings.log_level).upper()
    numeric = getattr(logging, level, None)
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level '{level}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)


def _read_entries(path: Path) -> Dict[str, Tuple[str, int]]:
    entries: Dict[str, Tuple[str, int]] = {}
    known = set(RunConfig.model_fields)
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigValueError(f"expected 'key = value', got '{raw.strip()}'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise UnknownConfigKeyError(f"unknown key '{key}'", key=key, line=number)
        if key in entries:
            raise InvalidConfigValueError(
                f"key '{key}' already set on line {entries[key][1]}", key=key, line=number
            )
        entries[key] = (value, number)
    return entries


def _translate(error: ValidationError, entries: Dict[str, Tuple[str, int]]) -> ConfigError:
    details = error.errors()
    missing = [d for d in details if d["type"] == "missing"]
    if missing:
        key = str(missing[0]["loc"][0])
        return MissingConfigKeyError(f"missing required key '{key}'", key=key)
    detail = details[0]
    message = detail["msg"].removeprefix("Value error, ")
    if not detail["loc"]:
        return IncompatibleConfigError(f"incompatible options: {message}")
    key = str(detail["loc"][0])
    line = entries[key][1] if key in entries else None
    if key not in entries:
        message = f"{message} (from preset)"
    return InvalidConfigValueError(f"invalid value for '{key}': {message}", key=key, line=line)


def parse_config(path: Union[str, Path]) -> RunConfig:
    """
    Read a flat `key = value` run configuration

    `#` starts a comment. List values are comma-separated. A `preset` key pulls in
    a method's defaults, which any other key in the file overrides.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    entries = _read_entries(path)

    values: Dict[str, object] = {}
    if "preset" in entries:
        preset, line = entries["preset"]
        try:
            values.update(get_preset(preset))
        except InvalidConfigValueError as e:
            raise InvalidConfigValueError(str(e), key="preset", line=line) from None
    values.update({key: value for key, (value, _) in entries.items()})

    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise _translate(e, entries) from None
