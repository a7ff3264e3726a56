"""
Forward and backward convolution under an arbitrary dilation lattice.

Boundary convention
-------------------
Output element (x, y) is centred on input position (x·s, y·s); kernel tap
(i, j) reads F at (x·s + i·D(c,k), y·s + j·D(c,k)) for i, j in
[-(K-1)/2, (K-1)/2], and reads outside the input are zero.  At stride 1 the
output therefore keeps the input size for every dilation at once.  Output
size is ceil(H/s) × ceil(W/s).  No half-pixel offset is applied for even
strides.

Strategies
----------
reference   ``loops.lattice_forward``: the literal six-loop sum, the oracle.
masked      one full dilated convolution per distinct rate, each with the
            kernels of other rates zeroed, summed.
rearranged  channels grouped by residue class (see
            ``kernel_lattice.rearrangement``); each (input class, rate) pair
            becomes one dense dilated convolution feeding every output class
            that uses that rate.

The vectorised paths work one sample at a time (one task per image on the
thread pool) and accumulate taps in a fixed order, so the result does not
depend on the worker count.  They match the oracle to ~1e-12 in float64;
the library contract is 1e-9.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import loops
from .kernel_lattice import DilationMatrix, LatticeError, RearrangementPlan, rearrangement
from .tensor_core import ShapeError, Tensor4, as_tensor4

logger = logging.getLogger(__name__)

STRATEGIES = ("reference", "masked", "rearranged")

_stats: Counter = Counter()
_stats_lock = threading.Lock()


class ConvError(ValueError):
    """Raised for inconsistent tensors, specs, lattices or plans."""


@dataclass(frozen=True)
class ConvSpec:
    cin: int
    cout: int
    k: int = 3
    stride: int = 1
    groups: int = 1

    def __post_init__(self) -> None:
        for name in ("cin", "cout", "k", "stride", "groups"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConvError(f"{name} must be a positive integer, got {value!r}")
        if self.k % 2 == 0:
            raise ConvError(f"kernel size must be odd, got {self.k}")
        if self.cin % self.groups or self.cout % self.groups:
            raise ConvError(
                f"groups={self.groups} must divide Cin={self.cin} and Cout={self.cout}"
            )

    @property
    def cin_per_group(self) -> int:
        return self.cin // self.groups

    @property
    def cout_per_group(self) -> int:
        return self.cout // self.groups

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.cout, self.cin_per_group, self.k, self.k)

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        return math.ceil(height / self.stride), math.ceil(width / self.stride)


# ── instrumentation ───────────────────────────────────────────────────────────

def dilated_conv_calls() -> int:
    """Number of ``dilated_conv2d`` invocations since the last reset."""
    return _stats["dilated_conv"]


def reset_stats() -> None:
    with _stats_lock:
        _stats.clear()


def _count(key: str) -> None:
    with _stats_lock:
        _stats[key] += 1


# ── validation ────────────────────────────────────────────────────────────────

def _check_weights(G: np.ndarray, spec: ConvSpec) -> np.ndarray:
    G = as_tensor4(G, "weights")
    if G.shape != spec.weight_shape:
        raise ShapeError(f"weights have shape {G.shape}, spec expects {spec.weight_shape}")
    return G


def _check_lattice(D: DilationMatrix, spec: ConvSpec) -> None:
    if D.shape != (spec.cout, spec.cin_per_group):
        raise ConvError(
            f"dilation matrix is {D.shape}, spec expects {(spec.cout, spec.cin_per_group)}"
        )
    if D.groups != spec.groups:
        raise ConvError(f"dilation matrix has {D.groups} groups, spec has {spec.groups}")


def _check_forward(F, G, spec: ConvSpec, D: Optional[DilationMatrix]):
    F = as_tensor4(F, "input")
    if F.shape[1] != spec.cin:
        raise ShapeError(f"input has {F.shape[1]} channels, spec expects {spec.cin}")
    G = _check_weights(G, spec)
    if D is not None:
        _check_lattice(D, spec)
    return F, G


def _check_dilation(d: int) -> int:
    if int(d) != d or d < 1:
        raise ConvError(f"dilation must be a positive integer, got {d!r}")
    return int(d)


# ── vectorised building blocks ────────────────────────────────────────────────

def _window(padded: np.ndarray, row0: int, col0: int, stride: int, hout: int, wout: int) -> np.ndarray:
    """Strided view of *padded* (C, Hp, Wp) starting at (row0, col0)."""
    return padded[
        :,
        row0:row0 + (hout - 1) * stride + 1:stride,
        col0:col0 + (wout - 1) * stride + 1:stride,
    ]


def _tap_offsets(k: int, d: int) -> Iterable[Tuple[int, int, int, int]]:
    half = (k - 1) // 2
    for i in range(k):
        for j in range(k):
            yield i, j, (i - half) * d, (j - half) * d


def _accumulate_taps(
    out: np.ndarray, padded: np.ndarray, w: np.ndarray, d: int, pad: int, stride: int,
) -> None:
    """out (Co, ho, wo) += dilated conv of padded (Ci, Hp, Wp) with w (Co, Ci, K, K)."""
    _, hout, wout = out.shape
    for i, j, dy, dx in _tap_offsets(w.shape[2], d):
        win = _window(padded, pad + dy, pad + dx, stride, hout, wout)
        out += np.tensordot(w[:, :, i, j], win, axes=1)


def _pad_sample(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def _run_per_sample(fn: Callable[[int], None], n_batch: int, threads: int) -> None:
    if threads <= 1 or n_batch <= 1:
        for n in range(n_batch):
            fn(n)
        return
    with ThreadPoolExecutor(max_workers=min(threads, n_batch)) as pool:
        list(pool.map(fn, range(n_batch)))


def _alloc_output(F: np.ndarray, spec: ConvSpec) -> np.ndarray:
    hout, wout = spec.output_hw(F.shape[2], F.shape[3])
    return np.zeros((F.shape[0], spec.cout, hout, wout))


# ── single-rate convolution ───────────────────────────────────────────────────

def dilated_conv2d(F: Tensor4, G: Tensor4, spec: ConvSpec, d: int = 1, threads: int = 1) -> Tensor4:
    """Grouped convolution with one dilation rate for every kernel."""
    F, G = _check_forward(F, G, spec, None)
    d = _check_dilation(d)
    _count("dilated_conv")
    out = _alloc_output(F, spec)
    pad = d * (spec.k - 1) // 2
    cin_pg, cout_pg = spec.cin_per_group, spec.cout_per_group

    def one(n: int) -> None:
        padded = _pad_sample(F[n], pad)
        for g in range(spec.groups):
            _accumulate_taps(
                out[n, g * cout_pg:(g + 1) * cout_pg],
                padded[g * cin_pg:(g + 1) * cin_pg],
                G[g * cout_pg:(g + 1) * cout_pg],
                d, pad, spec.stride,
            )

    _run_per_sample(one, F.shape[0], threads)
    return out


def dilated_conv2d_reference(F: Tensor4, G: Tensor4, spec: ConvSpec, d: int = 1, threads: int = 1) -> Tensor4:
    """Scalar-loop oracle for a single dilation rate."""
    F, G = _check_forward(F, G, spec, None)
    d = _check_dilation(d)
    loops.set_threads(threads)
    return loops.dilated_forward(F, G, d, spec.stride, spec.groups)


# ── lattice convolution ───────────────────────────────────────────────────────

def conv2d_reference(F: Tensor4, G: Tensor4, spec: ConvSpec, D: DilationMatrix, threads: int = 1) -> Tensor4:
    """Direct evaluation of the poly-scale sum; the oracle for every other path."""
    F, G = _check_forward(F, G, spec, D)
    loops.set_threads(threads)
    return loops.lattice_forward(F, G, np.ascontiguousarray(D.entries), spec.stride, spec.groups)


def _rate_masks(D: DilationMatrix) -> List[Tuple[int, np.ndarray]]:
    return [(d, (D.entries == d)[:, :, None, None]) for d in D.distinct_rates()]


def psconv_forward_masked(F: Tensor4, G: Tensor4, spec: ConvSpec, D: DilationMatrix, threads: int = 1) -> Tensor4:
    """Sum of one dilated convolution per distinct rate, with complementary kernels zeroed."""
    F, G = _check_forward(F, G, spec, D)
    out = _alloc_output(F, spec)
    for d, mask in _rate_masks(D):
        out += dilated_conv2d(F, np.where(mask, G, 0.0), spec, d, threads)
    return out


def _check_plan(D: DilationMatrix, plan: RearrangementPlan) -> None:
    layout = plan.layout
    if (
        plan.groups != D.groups
        or len(plan.perm_in_local) != D.cin_per_group
        or len(plan.perm_out_local) != D.cout_per_group
    ):
        raise ConvError("rearrangement plan does not match the dilation matrix")
    permuted = D.group_block(0)[plan.perm_out_local][:, plan.perm_in_local]
    expected = np.repeat(
        np.repeat(np.asarray(layout.values, dtype=np.int64), layout.block_rows, axis=0),
        layout.block_cols, axis=1,
    )
    if not np.array_equal(permuted, expected):
        raise ConvError("rearrangement plan does not match the dilation matrix")


def _block_schedule(plan: RearrangementPlan) -> List[Tuple[int, int, np.ndarray]]:
    """(input class r, rate d, local permuted output rows) triples."""
    layout = plan.layout
    schedule = []
    for r in range(layout.t):
        by_rate: Dict[int, List[int]] = {}
        for q in range(layout.t):
            by_rate.setdefault(layout.value(q, r), []).append(q)
        for d in sorted(by_rate):
            rows = np.concatenate([
                np.arange(q * layout.block_rows, (q + 1) * layout.block_rows) for q in by_rate[d]
            ])
            schedule.append((r, d, rows))
    return schedule


def psconv_forward_rearranged(
    F: Tensor4,
    G: Tensor4,
    spec: ConvSpec,
    D: DilationMatrix,
    plan: RearrangementPlan,
    threads: int = 1,
    *,
    input_order: str = "natural",
    output_order: str = "natural",
) -> Tensor4:
    """Block-wise execution over residue classes.

    With ``input_order="rearranged"`` *F* is already in the plan's input
    order (the rearranged output of a previous layer); with
    ``output_order="rearranged"`` the result stays in the plan's output
    order.  Weights are always given in natural order.
    """
    F, G = _check_forward(F, G, spec, D)
    _check_plan(D, plan)
    for name, order in (("input_order", input_order), ("output_order", output_order)):
        if order not in ("natural", "rearranged"):
            raise ConvError(f"{name} must be 'natural' or 'rearranged', got {order!r}")

    layout = plan.layout
    cin_pg, cout_pg = spec.cin_per_group, spec.cout_per_group
    w = G[plan.perm_out][:, plan.perm_in_local]
    schedule = _block_schedule(plan)
    pad = max(D.distinct_rates()) * (spec.k - 1) // 2
    out = _alloc_output(F, spec)

    def one(n: int) -> None:
        sample = F[n] if input_order == "rearranged" else F[n, plan.perm_in]
        padded = _pad_sample(sample, pad)
        for g in range(spec.groups):
            x_g = padded[g * cin_pg:(g + 1) * cin_pg]
            w_g = w[g * cout_pg:(g + 1) * cout_pg]
            out_g = out[n, g * cout_pg:(g + 1) * cout_pg]
            for r, d, rows in schedule:
                cols = slice(r * layout.block_cols, (r + 1) * layout.block_cols)
                acc = np.zeros((len(rows),) + out_g.shape[1:])
                _accumulate_taps(acc, x_g[cols], w_g[rows][:, cols], d, pad, spec.stride)
                out_g[rows] += acc

    _run_per_sample(one, F.shape[0], threads)
    if output_order == "rearranged":
        return out
    natural = np.empty_like(out)
    natural[:, plan.perm_out] = out
    return natural


def psconv_forward(
    F: Tensor4,
    G: Tensor4,
    spec: ConvSpec,
    D: DilationMatrix,
    strategy: str = "masked",
    threads: int = 1,
    plan: Optional[RearrangementPlan] = None,
) -> Tensor4:
    if strategy == "reference":
        return conv2d_reference(F, G, spec, D, threads)
    if strategy == "masked":
        return psconv_forward_masked(F, G, spec, D, threads)
    if strategy == "rearranged":
        try:
            plan = plan or rearrangement(D)
        except LatticeError as exc:
            raise ConvError(f"rearranged strategy unavailable: {exc}") from exc
        return psconv_forward_rearranged(F, G, spec, D, plan, threads)
    raise ConvError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")


# ── backward ──────────────────────────────────────────────────────────────────

def _check_grad_out(grad_out, spec: ConvSpec, n_batch: Optional[int], hw: Tuple[int, int]) -> np.ndarray:
    grad_out = as_tensor4(grad_out, "grad_out")
    expected = spec.output_hw(*hw)
    if grad_out.shape[1] != spec.cout or grad_out.shape[2:] != expected:
        raise ShapeError(
            f"grad_out has shape {grad_out.shape}, forward output is (N, {spec.cout}, {expected[0]}, {expected[1]})"
        )
    if n_batch is not None and grad_out.shape[0] != n_batch:
        raise ShapeError(f"grad_out batch {grad_out.shape[0]} does not match input batch {n_batch}")
    return grad_out


def conv2d_backward_input(
    grad_out: Tensor4,
    G: Tensor4,
    spec: ConvSpec,
    D: DilationMatrix,
    input_hw: Sequence[int],
    threads: int = 1,
) -> Tensor4:
    """Adjoint of the forward map with respect to the input."""
    height, width = (int(v) for v in input_hw)
    grad_out = _check_grad_out(grad_out, spec, None, (height, width))
    G = _check_weights(G, spec)
    _check_lattice(D, spec)
    cin_pg, cout_pg = spec.cin_per_group, spec.cout_per_group
    pad = max(D.distinct_rates()) * (spec.k - 1) // 2
    masked = [(d, np.where(mask, G, 0.0)) for d, mask in _rate_masks(D)]
    grad_in = np.zeros((grad_out.shape[0], spec.cin, height, width))
    _, _, hout, wout = grad_out.shape

    def one(n: int) -> None:
        padded = np.zeros((spec.cin, height + 2 * pad, width + 2 * pad))
        for d, w in masked:
            for g in range(spec.groups):
                go = grad_out[n, g * cout_pg:(g + 1) * cout_pg]
                w_g = w[g * cout_pg:(g + 1) * cout_pg]
                dst = padded[g * cin_pg:(g + 1) * cin_pg]
                for i, j, dy, dx in _tap_offsets(spec.k, d):
                    win = _window(dst, pad + dy, pad + dx, spec.stride, hout, wout)
                    win += np.tensordot(w_g[:, :, i, j].T, go, axes=1)
        grad_in[n] = padded[:, pad:pad + height, pad:pad + width]

    _run_per_sample(one, grad_out.shape[0], threads)
    return grad_in


def conv2d_backward_weight(
    grad_out: Tensor4,
    F: Tensor4,
    spec: ConvSpec,
    D: DilationMatrix,
) -> Tensor4:
    """Gradient with respect to the filter bank."""
    F = as_tensor4(F, "input")
    if F.shape[1] != spec.cin:
        raise ShapeError(f"input has {F.shape[1]} channels, spec expects {spec.cin}")
    grad_out = _check_grad_out(grad_out, spec, F.shape[0], F.shape[2:])
    _check_lattice(D, spec)
    cin_pg, cout_pg = spec.cin_per_group, spec.cout_per_group
    pad = max(D.distinct_rates()) * (spec.k - 1) // 2
    padded = np.pad(F, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    _, _, hout, wout = grad_out.shape
    grad_w = np.zeros(spec.weight_shape)

    for d, mask in _rate_masks(D):
        for g in range(spec.groups):
            go = grad_out[:, g * cout_pg:(g + 1) * cout_pg]
            src = padded[:, g * cin_pg:(g + 1) * cin_pg]
            rows = slice(g * cout_pg, (g + 1) * cout_pg)
            for i, j, dy, dx in _tap_offsets(spec.k, d):
                win = src[
                    :, :,
                    pad + dy:pad + dy + (hout - 1) * spec.stride + 1:spec.stride,
                    pad + dx:pad + dx + (wout - 1) * spec.stride + 1:spec.stride,
                ]
                tap = np.tensordot(go, win, axes=([0, 2, 3], [0, 2, 3]))
                grad_w[rows, :, i, j] += np.where(mask[rows, :, 0, 0], tap, 0.0)
    return grad_w
