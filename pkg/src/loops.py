"""
Scalar loop oracles, compiled with numba.

These kernels evaluate the convolution sums literally, one output element
at a time, with a fixed accumulation order: input channel ascending, then
kernel row i, then kernel column j.  Out-of-range input reads are skipped
(implicit zero extension around a centered sampling window).

Work is split over (n, c) output planes with ``prange``; every output
element is written by exactly one worker, so results do not depend on the
thread count.
"""

from __future__ import annotations

import logging

import numba
import numpy as np
from numba import njit, prange

logger = logging.getLogger(__name__)


def set_threads(threads: int) -> int:
    """Clamp *threads* to what numba was started with and apply it."""
    usable = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(usable)
    logger.debug("Loop oracles using %d of %d threads", usable, numba.config.NUMBA_NUM_THREADS)
    return usable


@njit(parallel=True)
def lattice_forward(x, w, dil, stride, groups):
    n_batch, _, height, width = x.shape
    cout, cin_pg, ksize, _ = w.shape
    cout_pg = cout // groups
    hout = (height + stride - 1) // stride
    wout = (width + stride - 1) // stride
    half = (ksize - 1) // 2
    out = np.zeros((n_batch, cout, hout, wout))
    for job in prange(n_batch * cout):
        n = job // cout
        c = job % cout
        base = (c // cout_pg) * cin_pg
        for oy in range(hout):
            for ox in range(wout):
                acc = 0.0
                for kk in range(cin_pg):
                    d = dil[c, kk]
                    for i in range(ksize):
                        iy = oy * stride + (i - half) * d
                        if iy < 0 or iy >= height:
                            continue
                        for j in range(ksize):
                            ix = ox * stride + (j - half) * d
                            if ix < 0 or ix >= width:
                                continue
                            acc += w[c, kk, i, j] * x[n, base + kk, iy, ix]
                out[n, c, oy, ox] = acc
    return out


@njit(parallel=True)
def dilated_forward(x, w, d, stride, groups):
    n_batch, _, height, width = x.shape
    cout, cin_pg, ksize, _ = w.shape
    cout_pg = cout // groups
    hout = (height + stride - 1) // stride
    wout = (width + stride - 1) // stride
    half = (ksize - 1) // 2
    out = np.zeros((n_batch, cout, hout, wout))
    for job in prange(n_batch * cout):
        n = job // cout
        c = job % cout
        base = (c // cout_pg) * cin_pg
        for oy in range(hout):
            for ox in range(wout):
                acc = 0.0
                for kk in range(cin_pg):
                    for i in range(ksize):
                        iy = oy * stride + (i - half) * d
                        if iy < 0 or iy >= height:
                            continue
                        for j in range(ksize):
                            ix = ox * stride + (j - half) * d
                            if ix < 0 or ix >= width:
                                continue
                            acc += w[c, kk, i, j] * x[n, base + kk, iy, ix]
                out[n, c, oy, ox] = acc
    return out
