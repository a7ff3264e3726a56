"""
Dense 4-D tensor helpers shared by every other module.

Tensors are plain ``numpy`` float64 arrays in row-major NCHW order (or
Cout×Cin×K×K for filter banks).  This module only adds the few things the
rest of the package needs on top of numpy: shape validation, the explicit
flat-index formula, seeded initialisation and the max-abs-diff metric used
by every equivalence check.

Random streams
--------------
``Rng`` wraps numpy's ``Generator`` over the ``PCG64`` bit generator, seeded
through ``SeedSequence``.  The same seed yields the same stream on every
platform for a given numpy release, which is what the determinism checks
rely on.  Child streams come from ``Rng.spawn(key)`` so independent parts of
a run (dataset, weights, case grid) never share state.
"""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np
import numpy.typing as npt

Tensor4 = npt.NDArray[np.float64]
Dims = Tuple[int, int, int, int]

# Largest element count we allow; keeps byte sizes inside a signed index.
_MAX_ELEMENTS = np.iinfo(np.intp).max // np.dtype(np.float64).itemsize


class ShapeError(ValueError):
    """Raised when tensor dimensions are invalid or do not agree."""


class TensorSizeError(OverflowError):
    """Raised when the flat length of a tensor would overflow."""


def check_dims(dims: Sequence[int]) -> Dims:
    """Validate *dims* as four nonnegative integers and return them as a tuple."""
    if len(dims) != 4:
        raise ShapeError(f"expected 4 dims, got {len(dims)}: {tuple(dims)}")
    out = tuple(int(d) for d in dims)
    if any(d < 0 for d in out):
        raise ShapeError(f"dims must be nonnegative, got {out}")
    if math.prod(out) > _MAX_ELEMENTS:
        raise TensorSizeError(f"tensor of dims {out} is too large to allocate")
    return out  # type: ignore[return-value]


def flat_index(dims: Sequence[int], idx: Sequence[int]) -> int:
    """Row-major offset of *idx* inside a tensor of *dims* (last axis fastest)."""
    d = check_dims(dims)
    if len(idx) != 4:
        raise ShapeError(f"expected a 4-part index, got {tuple(idx)}")
    a, b, c, e = (int(i) for i in idx)
    for pos, (i, n) in enumerate(zip((a, b, c, e), d)):
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for axis {pos} of size {n}")
    return ((a * d[1] + b) * d[2] + c) * d[3] + e


def zeros(dims: Sequence[int]) -> Tensor4:
    return np.zeros(check_dims(dims), dtype=np.float64)


def as_tensor4(x: npt.ArrayLike, name: str = "tensor") -> Tensor4:
    """Return *x* as a C-contiguous float64 4-D array, or raise ShapeError."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D, got shape {arr.shape}")
    return arr


def max_abs_diff(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Largest elementwise |a - b|; 0.0 for empty tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


class Rng:
    """Seeded, platform-independent random stream."""

    def __init__(self, seed: int | Sequence[int]) -> None:
        self._seed_seq = np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seed_seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, key: int) -> "Rng":
        """Independent child stream identified by *key*."""
        entropy = self._seed_seq.entropy
        base = list(entropy) if isinstance(entropy, (list, tuple)) else [entropy]
        return Rng([*base, *self._seed_seq.spawn_key, int(key)])

    def normal(self, shape: Sequence[int], sigma: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape)) * sigma

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size)

    def choice(self, options: Sequence):
        return options[int(self._gen.integers(0, len(options)))]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def randn(dims: Sequence[int], rng: Rng, sigma: float = 1.0) -> Tensor4:
    """I.i.d. N(0, sigma²) samples with the given dims."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return rng.normal(check_dims(dims), sigma).astype(np.float64, copy=False)
