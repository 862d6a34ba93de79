import logging
import os
from dataclasses import dataclass
from typing import Optional

import psutil
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

THREADS_ENV = "OVERLAP_BENCH_THREADS"
LOG_LEVEL_ENV = "OVERLAP_BENCH_LOG_LEVEL"
OUT_DIR_ENV = "OVERLAP_BENCH_OUT"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass
class RuntimeConfig:
    threads: int
    log_level: str = "INFO"
    out_dir: str = "results"


def get_setting(key: str, default: Optional[str] = None) -> Optional[str]:
    """Get a setting from the environment (after .env has been loaded)."""
    value = os.getenv(key)
    if value is None or value.strip() == "":
        return default
    return value.strip()


def default_threads() -> int:
    """Physical core count, falling back to logical cores, never below 1."""
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True) or 1
    return max(1, int(cores))


def parse_threads(raw: str, source: str) -> int:
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"{source} must be an integer, got {raw!r}")
    if threads < 1:
        raise ValueError(f"{source} must be at least 1, got {threads}")
    return threads


def load_config() -> RuntimeConfig:
    """Load and validate runtime configuration from the environment."""
    raw_threads = get_setting(THREADS_ENV)
    threads = default_threads()
    if raw_threads is not None:
        try:
            threads = parse_threads(raw_threads, THREADS_ENV)
        except ValueError as e:
            logger.warning(f"Ignoring invalid {THREADS_ENV}: {e}")

    log_level = get_setting(LOG_LEVEL_ENV, "INFO").upper()
    if log_level not in LOG_LEVELS:
        logger.warning(f"Ignoring invalid {LOG_LEVEL_ENV}: {log_level}")
        log_level = "INFO"

    return RuntimeConfig(
        threads=threads,
        log_level=log_level,
        out_dir=get_setting(OUT_DIR_ENV, "results"),
    )


def resolve_threads(flag_value: Optional[int]) -> int:
    """Parallelism precedence: command-line flag, then environment, then core count."""
    if flag_value is not None:
        return parse_threads(str(flag_value), "--threads")
    return load_config().threads


# Global configuration instance
config = load_config()
