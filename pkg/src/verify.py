"""
Randomized verification suites behind ``check``.

Suites
------
equivalence        masked and rearranged forwards against the loop oracle
                   over a randomized grid of shapes, strides, groups and
                   patterns.  Cases whose lattice cannot be rearranged
                   (t not dividing the per-group channel counts) skip the
                   rearranged comparison and are counted.
degenerate         constant-pattern lattices against the single-rate loop
                   oracle; must agree exactly.
adjoint            <conv(F), U> against <F, backward_input(U)> and
                   <G, backward_weight(U, F)>, scaled by |conv(F)|·|U|.
finite_difference  both backward operations against central differences.

Every case is generated from its own case seed, derived from the run seed
and the case index, so a failure can be replayed with ``--replay``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import conv_engine
from .conv_engine import ConvSpec
from .kernel_lattice import (
    DilationMatrix,
    DilationPattern,
    LatticeError,
    build_psconv_grouped,
    rearrangement,
)
from .tensor_core import Rng, max_abs_diff, randn

logger = logging.getLogger(__name__)

CASE_PATTERNS = ((1,), (2,), (1, 2), (1, 2, 1, 4))
ADJOINT_TOL = 1e-10
FD_TOL = 1e-6
FD_STEP = 1e-5
PROGRESS_EVERY = 100


@dataclass
class ConvCase:
    case_seed: int
    spec: ConvSpec
    D: DilationMatrix
    F: np.ndarray
    G: np.ndarray

    def describe(self) -> str:
        s = self.spec
        return (
            f"N={self.F.shape[0]} Cin={s.cin} Cout={s.cout} HxW={self.F.shape[2]}x{self.F.shape[3]} "
            f"stride={s.stride} groups={s.groups} pattern={{{self.D.pattern}}}"
        )


@dataclass
class SuiteResult:
    name: str
    tol: float
    cases: int = 0
    max_error: float = 0.0
    skipped: int = 0
    failing_case_seed: Optional[int] = None
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failing_case_seed is None and self.max_error <= self.tol

    def record(self, error: float, case_seed: int, key: Optional[str] = None) -> None:
        self.max_error = max(self.max_error, error)
        if key is not None:
            self.details[key] = max(self.details.get(key, 0.0), error)
        if not error <= self.tol and self.failing_case_seed is None:
            self.failing_case_seed = case_seed
            logger.error("Suite %s: case seed %d exceeds tolerance (%.3e > %.1e)",
                         self.name, case_seed, error, self.tol)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "cases": self.cases,
            "skipped": self.skipped,
            "tol": self.tol,
            "max_error": self.max_error,
            "details": self.details,
            "passed": self.passed,
            "failing_case_seed": self.failing_case_seed,
        }


@dataclass
class CheckReport:
    seed: int
    cases: int
    tol: float
    suites: List[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "seed": self.seed,
            "cases": self.cases,
            "tol": self.tol,
            "passed": self.passed,
            "suites": [s.to_dict() for s in self.suites],
        }


# ── case generation ───────────────────────────────────────────────────────────

def derive_seed(seed: int, index: int) -> int:
    """Case seed for case *index* of a run seeded with *seed*."""
    state = np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))


def random_case(case_seed: int, patterns=CASE_PATTERNS) -> ConvCase:
    rng = Rng(case_seed)
    n = rng.choice((1, 2))
    cin = rng.choice((4, 8, 16))
    cout = rng.choice((4, 8, 16))
    height = int(rng.integers(7, 15))
    width = int(rng.integers(7, 15))
    stride = rng.choice((1, 2))
    groups = rng.choice((1, 2))
    pattern = DilationPattern(rng.choice(patterns))
    spec = ConvSpec(cin, cout, 3, stride, groups)
    D = build_psconv_grouped(cout, cin, groups, pattern)
    F = randn((n, cin, height, width), rng)
    G = randn(spec.weight_shape, rng)
    return ConvCase(case_seed, spec, D, F, G)


def _small_case(case_seed: int) -> ConvCase:
    rng = Rng(case_seed)
    stride = rng.choice((1, 2))
    groups = rng.choice((1, 2))
    spec = ConvSpec(4, 4, 3, stride, groups)
    D = build_psconv_grouped(4, 4, groups, DilationPattern.default())
    F = randn((1, 4, 6, 6), rng)
    G = randn(spec.weight_shape, rng)
    return ConvCase(case_seed, spec, D, F, G)


# ── numeric helpers ───────────────────────────────────────────────────────────

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar *fn* at *x*."""
    probe = np.array(x, dtype=np.float64, copy=True)
    flat = probe.reshape(-1)
    grad = np.zeros(flat.size)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = fn(probe)
        flat[idx] = orig - h
        f_minus = fn(probe)
        flat[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)


def _log_progress(suite: SuiteResult, total: int) -> None:
    if suite.cases % PROGRESS_EVERY == 0 or suite.cases == total:
        logger.info("  %s: %d/%d cases (max error %.3e, %d skipped)",
                    suite.name, suite.cases, total, suite.max_error, suite.skipped)


# ── suites ────────────────────────────────────────────────────────────────────

def check_equivalence_case(case: ConvCase, suite: SuiteResult, threads: int = 1) -> None:
    ref = conv_engine.conv2d_reference(case.F, case.G, case.spec, case.D, threads)
    masked = conv_engine.psconv_forward_masked(case.F, case.G, case.spec, case.D, threads)
    suite.record(max_abs_diff(ref, masked), case.case_seed, "max_abs_diff_masked")
    try:
        plan = rearrangement(case.D)
    except LatticeError:
        suite.skipped += 1
    else:
        rearranged = conv_engine.psconv_forward_rearranged(
            case.F, case.G, case.spec, case.D, plan, threads,
        )
        suite.record(max_abs_diff(ref, rearranged), case.case_seed, "max_abs_diff_rearranged")
    suite.cases += 1


def run_equivalence(cases: int, seed: int, tol: float, threads: int = 1) -> SuiteResult:
    suite = SuiteResult("equivalence", tol)
    for idx in range(cases):
        case = random_case(derive_seed(seed, idx))
        check_equivalence_case(case, suite, threads)
        _log_progress(suite, cases)
    return suite


def run_degenerate(cases: int, seed: int, threads: int = 1) -> SuiteResult:
    suite = SuiteResult("degenerate", 0.0)
    for idx in range(cases):
        case_seed = derive_seed(seed + 1, idx)
        rng = Rng(case_seed)
        d = rng.choice((1, 2, 3))
        t = rng.choice((1, 2, 4))
        case = random_case(case_seed, patterns=((d,) * t,))
        lattice = conv_engine.conv2d_reference(case.F, case.G, case.spec, case.D, threads)
        dilated = conv_engine.dilated_conv2d_reference(case.F, case.G, case.spec, d, threads)
        suite.record(max_abs_diff(lattice, dilated), case_seed)
        suite.cases += 1
        _log_progress(suite, cases)
    return suite


def run_adjoint(cases: int, seed: int, tol: float = ADJOINT_TOL, threads: int = 1) -> SuiteResult:
    suite = SuiteResult("adjoint", tol)
    for idx in range(cases):
        case = random_case(derive_seed(seed + 2, idx))
        rng = Rng(case.case_seed).spawn(1)
        out = conv_engine.conv2d_reference(case.F, case.G, case.spec, case.D, threads)
        U = randn(out.shape, rng)
        scale = float(np.linalg.norm(out) * np.linalg.norm(U)) or 1.0
        lhs = float(np.vdot(out, U))
        grad_in = conv_engine.conv2d_backward_input(U, case.G, case.spec, case.D, case.F.shape[2:], threads)
        grad_w = conv_engine.conv2d_backward_weight(U, case.F, case.spec, case.D)
        suite.record(abs(lhs - float(np.vdot(case.F, grad_in))) / scale, case.case_seed, "input")
        suite.record(abs(lhs - float(np.vdot(case.G, grad_w))) / scale, case.case_seed, "weight")
        suite.cases += 1
        _log_progress(suite, cases)
    return suite


def run_finite_difference(cases: int, seed: int, tol: float = FD_TOL, h: float = FD_STEP) -> SuiteResult:
    suite = SuiteResult("finite_difference", tol)
    for idx in range(cases):
        case = _small_case(derive_seed(seed + 3, idx))
        spec, D = case.spec, case.D
        out = conv_engine.conv2d_reference(case.F, case.G, spec, D)
        U = randn(out.shape, Rng(case.case_seed).spawn(1))

        def loss_wrt_input(x: np.ndarray) -> float:
            return float(np.vdot(conv_engine.conv2d_reference(x, case.G, spec, D), U))

        def loss_wrt_weight(w: np.ndarray) -> float:
            return float(np.vdot(conv_engine.conv2d_reference(case.F, w, spec, D), U))

        grad_in = conv_engine.conv2d_backward_input(U, case.G, spec, D, case.F.shape[2:])
        grad_w = conv_engine.conv2d_backward_weight(U, case.F, spec, D)
        suite.record(relative_error(grad_in, finite_difference_grad(loss_wrt_input, case.F, h)),
                     case.case_seed, "input")
        suite.record(relative_error(grad_w, finite_difference_grad(loss_wrt_weight, case.G, h)),
                     case.case_seed, "weight")
        suite.cases += 1
        _log_progress(suite, cases)
    return suite


def run_check(cases: int, seed: int, tol: float, threads: int = 1) -> CheckReport:
    """All suites; suite sizes are capped at 100 (degenerate), 200 (adjoint), 50 (FD)."""
    if cases < 1:
        raise ValueError("cases must be >= 1")
    report = CheckReport(seed=seed, cases=cases, tol=tol)
    logger.info("Running equivalence suite (%d cases, tol %.1e)…", cases, tol)
    report.suites.append(run_equivalence(cases, seed, tol, threads))
    logger.info("Running degenerate-reduction suite…")
    report.suites.append(run_degenerate(min(cases, 100), seed, threads))
    logger.info("Running adjoint suite…")
    report.suites.append(run_adjoint(min(cases, 200), seed, threads=threads))
    logger.info("Running finite-difference suite…")
    report.suites.append(run_finite_difference(min(cases, 50), seed))
    return report


def replay(case_seed: int, tol: float, threads: int = 1) -> CheckReport:
    """Re-run the single equivalence case generated from *case_seed*."""
    case = random_case(case_seed)
    logger.info("Replaying case %d: %s", case_seed, case.describe())
    suite = SuiteResult("equivalence", tol)
    check_equivalence_case(case, suite, threads)
    return CheckReport(seed=case_seed, cases=1, tol=tol, suites=[suite])
