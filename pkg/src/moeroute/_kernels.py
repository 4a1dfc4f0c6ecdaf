"""Hot row-movement and counting kernels.

Each kernel has a numba ``@njit`` loop and a pure-numpy version (row gather
is shared, see below). Both produce bit-identical results. The numba path is used when numba imports
and ``MOEROUTE_DISABLE_NUMBA`` is unset (or ``0``); ``numpy_kernels`` and
``numba_kernels`` expose each backend explicitly for tests and benchmarks.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

DISABLE_NUMBA = os.environ.get("MOEROUTE_DISABLE_NUMBA", "0").strip().lower() not in (
    "", "0", "false", "no")
NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and not DISABLE_NUMBA


# -- numpy ------------------------------------------------------------------

def _np_gather_rows(src, idx):
    return src[idx]


def _np_scatter_add_rows(out, src, idx, weights):
    # np.add.at is unbuffered and walks idx in order: ascending-i accumulation.
    np.add.at(out, idx, src * weights[:, None])
    return out


def _np_count_distinct_per_row(values):
    # Negative entries mark absent copies and are ignored.
    if values.shape[1] == 0:
        return np.zeros(values.shape[0], dtype=np.int64)
    srt = np.sort(values, axis=1)
    valid = srt >= 0
    fresh = np.ones_like(valid)
    fresh[:, 1:] = srt[:, 1:] != srt[:, :-1]
    return np.count_nonzero(valid & fresh, axis=1).astype(np.int64)


def _np_capacity_keep(experts_in_order, num_experts, cap):
    # Transposed one-hot [E, n] so the running count walks the contiguous axis.
    n = experts_in_order.shape[0]
    one_hot = np.zeros((num_experts, n), dtype=np.int64)
    one_hot[experts_in_order, np.arange(n)] = 1
    rank = np.cumsum(one_hot, axis=1)[experts_in_order, np.arange(n)]
    return rank <= cap


# -- numba ------------------------------------------------------------------

if NUMBA_AVAILABLE:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _nb_scatter_add_rows(out, src, idx, weights):
        for i in range(idx.shape[0]):
            row = idx[i]
            w = weights[i]
            for h in range(src.shape[1]):
                out[row, h] += src[i, h] * w
        return out

    @_jit
    def _nb_count_distinct_per_row(values):
        n, k = values.shape
        out = np.zeros(n, dtype=np.int64)
        for i in range(n):
            count = 0
            for j in range(k):
                v = values[i, j]
                if v < 0:
                    continue
                seen = False
                for jj in range(j):
                    if values[i, jj] == v:
                        seen = True
                        break
                if not seen:
                    count += 1
            out[i] = count
        return out

    @_jit
    def _nb_capacity_keep(experts_in_order, num_experts, cap):
        counts = np.zeros(num_experts, dtype=np.int64)
        keep = np.zeros(experts_in_order.shape[0], dtype=np.bool_)
        for i in range(experts_in_order.shape[0]):
            e = experts_in_order[i]
            counts[e] += 1
            keep[i] = counts[e] <= cap
        return keep


def _wrap(gather, scatter, distinct, capacity, name):
    def gather_rows(src, idx):
        return gather(np.ascontiguousarray(src, dtype=np.float64),
                      np.ascontiguousarray(idx, dtype=np.int64))

    def scatter_add_rows(out, src, idx, weights):
        return scatter(out, np.ascontiguousarray(src, dtype=np.float64),
                       np.ascontiguousarray(idx, dtype=np.int64),
                       np.ascontiguousarray(weights, dtype=np.float64))

    def count_distinct_per_row(values):
        return distinct(np.ascontiguousarray(values, dtype=np.int64))

    def capacity_keep(experts_in_order, num_experts, cap):
        return capacity(np.ascontiguousarray(experts_in_order, dtype=np.int64),
                        int(num_experts), int(cap))

    return SimpleNamespace(name=name, gather_rows=gather_rows,
                           scatter_add_rows=scatter_add_rows,
                           count_distinct_per_row=count_distinct_per_row,
                           capacity_keep=capacity_keep)


numpy_kernels = _wrap(_np_gather_rows, _np_scatter_add_rows, _np_count_distinct_per_row,
                      _np_capacity_keep, "numpy")
# numpy fancy indexing already copies rows in a compiled loop and beat the
# jitted version in benchmarks/bench_kernels.py, so both backends share it.
numba_kernels = (_wrap(_np_gather_rows, _nb_scatter_add_rows, _nb_count_distinct_per_row,
                       _nb_capacity_keep, "numba") if NUMBA_AVAILABLE else None)

active = numba_kernels if USE_NUMBA else numpy_kernels
