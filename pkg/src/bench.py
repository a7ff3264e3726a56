"""
Wall-clock benchmark of the convolution strategies.

Strategies
----------
reference   numba loop oracle over the psconv lattice
masked      one dilated convolution per distinct rate
rearranged  block-wise execution over residue classes (plan built untimed)
dilated     single-rate dilated convolution at ``--dilation``
standard    single-rate convolution at d=1; the baseline for ratios

Each strategy runs ``warmup`` untimed iterations (which also absorb numba
compilation), then ``repeats`` timed ones on ``time.perf_counter``.  The
headline number is the median; ratios are medians over the standard
median.  A strategy that cannot run for the configured shape is reported
as an error entry and the others still run.
"""

from __future__ import annotations

import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numba
import numpy as np

from . import conv_engine
from .conv_engine import ConvError, ConvSpec
from .kernel_lattice import DilationPattern, LatticeError, build_psconv_grouped, rearrangement
from .tensor_core import Rng, ShapeError, randn

logger = logging.getLogger(__name__)

BENCH_STRATEGIES = ("reference", "masked", "rearranged", "dilated", "standard")
CSV_FIELDS = ("strategy", "status", "median_ms", "mean_ms", "p95_ms", "ratio_vs_standard", "error")


class BenchConfigError(ValueError):
    """Raised for invalid benchmark shapes, patterns or strategy lists."""


def _pattern_text(pattern: object) -> str:
    """Comma text for a pattern given as text or as a JSON list of rates."""
    if isinstance(pattern, str):
        return pattern
    if isinstance(pattern, (list, tuple)) and pattern and all(
        isinstance(r, int) and not isinstance(r, bool) for r in pattern
    ):
        return ",".join(str(r) for r in pattern)
    raise BenchConfigError(f"pattern must be a string or a list of integers, got {pattern!r}")


@dataclass(frozen=True)
class BenchConfig:
    shape: Tuple[int, int, int, int] = (200, 64, 56, 56)
    cout: int = 64
    k: int = 3
    stride: int = 1
    groups: int = 1
    pattern: str = "1,2,1,4"
    dilation: int = 2
    strategies: Tuple[str, ...] = BENCH_STRATEGIES
    repeats: int = 3
    warmup: int = 1
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        shape = tuple(int(v) for v in self.shape)
        if len(shape) != 4 or any(v < 1 for v in shape):
            raise BenchConfigError(f"shape must be four positive integers, got {self.shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "pattern", _pattern_text(self.pattern))
        for name in ("cout", "k", "stride", "groups", "dilation", "repeats", "threads"):
            if getattr(self, name) < 1:
                raise BenchConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup < 0:
            raise BenchConfigError(f"warmup must be >= 0, got {self.warmup}")
        unknown = [s for s in self.strategies if s not in BENCH_STRATEGIES]
        if unknown or not self.strategies:
            raise BenchConfigError(
                f"strategies must be a non-empty subset of {', '.join(BENCH_STRATEGIES)}, got {self.strategies}"
            )
        try:
            ConvSpec(self.shape[1], self.cout, self.k, self.stride, self.groups)
            build_psconv_grouped(self.cout, self.shape[1], self.groups, DilationPattern.parse(self.pattern))
        except (LatticeError, ConvError) as exc:
            raise BenchConfigError(str(exc)) from exc

    @property
    def noisy(self) -> bool:
        return self.repeats < 3 or self.warmup == 0

    def with_overrides(self, overrides: Mapping[str, object]) -> "BenchConfig":
        """Copy with every non-None entry of *overrides* applied."""
        known = {f.name for f in fields(self)}
        bad = set(overrides) - known
        if bad:
            raise BenchConfigError(f"unknown benchmark settings: {', '.join(sorted(bad))}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @classmethod
    def from_json(cls, path: str, base: Optional["BenchConfig"] = None) -> "BenchConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise BenchConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise BenchConfigError(f"{path}: expected a JSON object")
        return (base or cls()).with_overrides(data)


@dataclass
class StrategyTiming:
    strategy: str
    status: str = "ok"
    samples_ms: List[float] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def median_ms(self) -> Optional[float]:
        return float(np.median(self.samples_ms)) if self.samples_ms else None

    @property
    def mean_ms(self) -> Optional[float]:
        return float(np.mean(self.samples_ms)) if self.samples_ms else None

    @property
    def p95_ms(self) -> Optional[float]:
        return float(np.percentile(self.samples_ms, 95)) if self.samples_ms else None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "status": self.status,
            "median_ms": self.median_ms,
            "mean_ms": self.mean_ms,
            "p95_ms": self.p95_ms,
            "samples_ms": self.samples_ms,
            "error": self.error,
        }


@dataclass
class BenchReport:
    config: BenchConfig
    timings: List[StrategyTiming] = field(default_factory=list)

    def ratios(self) -> Dict[str, float]:
        by_name = {t.strategy: t for t in self.timings}
        base = by_name.get("standard")
        if base is None or base.median_ms is None or base.median_ms <= 0:
            return {}
        return {
            t.strategy: t.median_ms / base.median_ms
            for t in self.timings if t.median_ms is not None
        }

    def environment(self) -> dict:
        return {
            "threads": self.config.threads,
            "host": platform.node(),
            "platform": platform.platform(),
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "numba": numba.__version__,
            "timer": "perf_counter",
            "noisy": self.config.noisy,
        }

    def to_dict(self) -> dict:
        config = asdict(self.config)
        config["shape"] = list(self.config.shape)
        config["strategies"] = list(self.config.strategies)
        return {
            "schema_version": 1,
            "config": config,
            "environment": self.environment(),
            "strategies": [t.to_dict() for t in self.timings],
            "ratios_vs_standard": self.ratios(),
        }

    def rows(self) -> List[dict]:
        ratios = self.ratios()
        return [
            {**t.to_dict(), "ratio_vs_standard": ratios.get(t.strategy, ""), "error": t.error or ""}
            for t in self.timings
        ]


# ── runners ───────────────────────────────────────────────────────────────────

def _runners(cfg: BenchConfig, F: np.ndarray, G: np.ndarray) -> Dict[str, Callable[[], object]]:
    """Zero-argument callables per strategy; raises per strategy on setup failure."""
    spec = ConvSpec(cfg.shape[1], cfg.cout, cfg.k, cfg.stride, cfg.groups)
    D = build_psconv_grouped(cfg.cout, cfg.shape[1], cfg.groups, DilationPattern.parse(cfg.pattern))
    threads = cfg.threads
    runners: Dict[str, Callable[[], object]] = {
        "reference": lambda: conv_engine.conv2d_reference(F, G, spec, D, threads),
        "masked": lambda: conv_engine.psconv_forward_masked(F, G, spec, D, threads),
        "dilated": lambda: conv_engine.dilated_conv2d(F, G, spec, cfg.dilation, threads),
        "standard": lambda: conv_engine.dilated_conv2d(F, G, spec, 1, threads),
    }
    if "rearranged" in cfg.strategies:
        try:
            plan = rearrangement(D)
        except LatticeError as exc:
            runners["rearranged"] = _raiser(exc)
        else:
            runners["rearranged"] = lambda: conv_engine.psconv_forward_rearranged(F, G, spec, D, plan, threads)
    return runners


def _raiser(exc: Exception) -> Callable[[], object]:
    def run() -> object:
        raise exc
    return run


def time_strategy(name: str, fn: Callable[[], object], repeats: int, warmup: int) -> StrategyTiming:
    timing = StrategyTiming(name)
    try:
        for _ in range(warmup):
            fn()
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            timing.samples_ms.append((time.perf_counter() - start) * 1000.0)
    except (LatticeError, ConvError, ShapeError, MemoryError) as exc:
        timing.status = "error"
        timing.samples_ms = []
        timing.error = f"{type(exc).__name__}: {exc}"
        logger.warning("Strategy %s failed: %s", name, timing.error)
    return timing


def run_benchmark(cfg: BenchConfig) -> BenchReport:
    logger.info("Benchmark shape %s → Cout=%d K=%d stride=%d groups=%d pattern {%s}",
                cfg.shape, cfg.cout, cfg.k, cfg.stride, cfg.groups, cfg.pattern)
    if cfg.noisy:
        logger.warning("repeats=%d warmup=%d: timings flagged noisy", cfg.repeats, cfg.warmup)
    rng = Rng(cfg.seed)
    F = randn(cfg.shape, rng.spawn(0))
    G = randn((cfg.cout, cfg.shape[1] // cfg.groups, cfg.k, cfg.k), rng.spawn(1))
    runners = _runners(cfg, F, G)

    report = BenchReport(cfg)
    for name in cfg.strategies:
        timing = time_strategy(name, runners[name], cfg.repeats, cfg.warmup)
        report.timings.append(timing)
        if timing.status == "ok":
            logger.info("  %-10s median %.2f ms  (mean %.2f, p95 %.2f)",
                        name, timing.median_ms, timing.mean_ms, timing.p95_ms)
    return report
