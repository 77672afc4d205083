"""
Runtime settings for the csbm package.

Defaults can be overridden by environment variables, then by an INI file with
one section per CLI subcommand, and finally by command-line flags.
"""
import configparser
import contextlib
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, Mapping, Optional

from threadpoolctl import threadpool_limits

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENUMERATION_MAX_NODES = 16

_TRUE_VALUES = {"1", "true", "yes", "on"}
_FALSE_VALUES = {"0", "false", "no", "off", ""}


@dataclass(frozen=True)
class Settings:
    """Process-wide knobs that are not model parameters."""
    memory_budget_bytes: int = 2 * 1024 ** 3
    dense_max_nodes: int = 20_000
    enumeration_max_nodes: int = ENUMERATION_MAX_NODES
    threads: int = 1
    deterministic: bool = False
    log_level: str = "WARNING"

    def with_overrides(self, **changes) -> "Settings":
        """Return a copy with the non-None entries of ``changes`` applied."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def parse_bool(value: str, name: str) -> bool:
    lowered = value.strip().lower()
    if lowered in _TRUE_VALUES:
        return True
    if lowered in _FALSE_VALUES:
        return False
    raise ConfigError(f"{name} must be a boolean (true/false), got {value!r}")


def _parse_int(value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}")


def load_settings(env: Optional[Mapping[str, str]] = None) -> Settings:
    """
    Build Settings from defaults and environment variables.

    Recognized variables: CSBM_MEMORY_BUDGET_MB, CSBM_DENSE_MAX_NODES,
    CSBM_THREADS, CSBM_DETERMINISTIC, CSBM_LOG_LEVEL.
    """
    env = os.environ if env is None else env
    settings = Settings()

    budget_mb = env.get("CSBM_MEMORY_BUDGET_MB")
    if budget_mb:
        settings = replace(
            settings,
            memory_budget_bytes=_parse_int(budget_mb, "CSBM_MEMORY_BUDGET_MB") * 1024 ** 2,
        )
    dense_max = env.get("CSBM_DENSE_MAX_NODES")
    if dense_max:
        settings = replace(settings, dense_max_nodes=_parse_int(dense_max, "CSBM_DENSE_MAX_NODES"))
    threads = env.get("CSBM_THREADS")
    if threads:
        settings = replace(settings, threads=max(1, _parse_int(threads, "CSBM_THREADS")))
    deterministic = env.get("CSBM_DETERMINISTIC")
    if deterministic is not None:
        settings = replace(settings, deterministic=parse_bool(deterministic, "CSBM_DETERMINISTIC"))
    log_level = env.get("CSBM_LOG_LEVEL")
    if log_level:
        settings = replace(settings, log_level=log_level.upper())
    return settings


def read_config_file(path: str) -> Dict[str, Dict[str, str]]:
    """
    Read an INI-style experiment file.

    Returns:
        {section: {key: raw string value}}; the ``[global]`` section applies to
        every subcommand.
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"Could not parse config file {path}: {e}")
    logger.debug("Loaded config %s with sections %s", path, parser.sections())
    return {section: dict(parser.items(section)) for section in parser.sections()}


def section_overrides(config: Dict[str, Dict[str, str]], section: str) -> Dict[str, str]:
    """Merge ``[global]`` and ``[section]`` keys, the latter winning."""
    merged = dict(config.get("global", {}))
    merged.update(config.get(section, {}))
    return merged


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Process-wide settings, read from the environment on first use."""
    global _settings
    if _settings is None:
        _settings = load_settings()
    return _settings


def set_settings(settings: Settings) -> None:
    global _settings
    _settings = settings


def compute_context(deterministic: bool):
    """
    Context for a solver run. With ``deterministic`` the BLAS pool is pinned to
    one thread so reductions happen in a fixed order.
    """
    if not deterministic:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)
