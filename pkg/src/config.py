import logging
import os
from dataclasses import dataclass

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _int_env(name: str, default: int) -> int:
    raw = os.environ.get(name, "")
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise EnvironmentError(f"{name} must be an integer, got {raw!r}") from exc


@dataclass
class Config:
    threads: int = 1
    log_level: str = "INFO"
    seed: int = 0
    pattern: str = "1,2,1,4"  # comma list or preset name

    bench_repeats: int = 3
    bench_warmup: int = 1

    @property
    def log_level_value(self) -> int:
        return getattr(logging, self.log_level)

    @classmethod
    def from_env(cls) -> "Config":
        threads = _int_env("PSCONV_THREADS", os.cpu_count() or 1)
        if threads < 1:
            raise EnvironmentError("PSCONV_THREADS must be >= 1")
        repeats = _int_env("PSCONV_BENCH_REPEATS", 3)
        if repeats < 1:
            raise EnvironmentError("PSCONV_BENCH_REPEATS must be >= 1")
        warmup = _int_env("PSCONV_BENCH_WARMUP", 1)
        if warmup < 0:
            raise EnvironmentError("PSCONV_BENCH_WARMUP must be >= 0")
        seed = _int_env("PSCONV_SEED", 0)
        if seed < 0:
            raise EnvironmentError("PSCONV_SEED must be >= 0")
        log_level = os.environ.get("PSCONV_LOG_LEVEL", "INFO").strip().upper() or "INFO"
        if log_level not in _LOG_LEVELS:
            raise EnvironmentError(f"PSCONV_LOG_LEVEL must be one of {', '.join(_LOG_LEVELS)}, got {log_level!r}")
        return cls(
            threads=threads,
            log_level=log_level,
            seed=seed,
            pattern=os.environ.get("PSCONV_PATTERN", "") or "1,2,1,4",
            bench_repeats=repeats,
            bench_warmup=warmup,
        )
