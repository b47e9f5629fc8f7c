"""Compute-scaling benchmark: MambaTron cell versus full self-attention."""
from __future__ import annotations

import time

import numpy as np

from . import numerics as nx
from .blockattn import BlockConfig, full_attention
from .cell import CellParams, mambatron_forward

BENCH_COLUMNS = ("L", "cell_ns", "cell_macs", "attn_ns", "attn_macs")


def _timed(fn, reps):
    best, macs = None, None
    for _ in range(reps):
        with nx.count_macs() as counter:
            t0 = time.perf_counter_ns()
            fn()
            dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
        macs = counter.total
    return best, macs


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def bench_complexity(L_list, w_blk=4, c=64, reps=1, n_state=16, heads=4, seed=0, dtype=np.float32):
    """Rows of (L, cell_ns, cell_macs, attn_ns, attn_macs) and fitted log-log slopes.

    The attention baseline is the quadratic mixing of one full-attention layer,
    softmax(Q K^T / sqrt(C)) V over all L tokens.
    """
    L_list = list(L_list)
    if len(L_list) < 4 or sorted(L_list) != L_list:
        raise ValueError("L_list must be ascending with at least 4 entries")
    rng = np.random.default_rng(seed)
    params = CellParams(c, n_state, rng, max_len=1, dtype=dtype)
    cfg = BlockConfig(w_blk, heads, c)
    rows = []
    for L in L_list:
        x = rng.normal(size=(L, c)).astype(dtype)
        gcp = np.zeros((L, c), dtype=dtype)
        with nx.no_grad():
            cell_ns, cell_macs = _timed(lambda: mambatron_forward(nx.Tensor(x), params, cfg, gcp), reps)
        attn_ns, attn_macs = _timed(lambda: full_attention(x, x, x), reps)
        rows.append((L, cell_ns, cell_macs, attn_ns, attn_macs))
    arr = np.array(rows, dtype=np.float64)
    slopes = {
        "cell_macs": loglog_slope(arr[:, 0], arr[:, 2]),
        "attn_macs": loglog_slope(arr[:, 0], arr[:, 4]),
        "cell_ns": loglog_slope(arr[:, 0], arr[:, 1]),
        "attn_ns": loglog_slope(arr[:, 0], arr[:, 3]),
    }
    return rows, slopes


def powers_of_two(lmin, lmax):
    out, L = [], lmin
    while L <= lmax:
        out.append(L)
        L *= 2
    return out
