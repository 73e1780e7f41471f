"""Pure numpy kernels; same contract as the compiled ``_ckernels`` module.

``run_chunk`` advances a server state through ``len(etas)`` iterations whose
active sets are given in CSR form.  Arrays ``w``, ``slots``, ``rs`` and
``stamps`` are updated in place.  Returns ``-1`` on success or the offset
``j`` of the iteration after which the iterate diverged.
"""
from __future__ import annotations

import numpy as np

from siag._backend import IAG, SGD
from siag.problem import lsq_gradient

DIVERGENCE_NORM = 1e9


def run_chunk(method, w, slots, rs, stamps, w_local, w_star, offsets, workers, draws, etas,
              t0, noise_std, p, divide_by_active, gaps, w_hist, g_hist):
    n, d = slots.shape
    record_w = w_hist is not None and len(w_hist) > 0
    record_g = g_hist is not None and len(g_hist) > 0
    if record_w:
        w_hist[0] = w
    for j in range(len(etas)):
        t = t0 + j
        lo, hi = offsets[j], offsets[j + 1]
        if method == SGD:
            agg = np.zeros(d)
            for r in range(lo, hi):
                agg = agg + lsq_gradient(draws[r], w_local[workers[r]], w, noise_std, p, d)
            divisor = (hi - lo) if divide_by_active else n
        else:
            for r in range(lo, hi):
                i = workers[r]
                if method == IAG:
                    g = p * (w - w_local[i])
                else:
                    g = lsq_gradient(draws[r], w_local[i], w, noise_std, p, d)
                rs[:] = (rs - slots[i]) + g
                slots[i] = g
                stamps[i] = t
            agg = rs
            divisor = n
        if record_g:
            g_hist[j] = agg
        w -= (etas[j] / divisor) * agg
        diff = w - w_star
        gaps[j] = diff @ diff
        if not np.isfinite(gaps[j]) or np.sqrt(w @ w) > DIVERGENCE_NORM:
            return j
        if record_w:
            w_hist[j + 1] = w
    return -1


def cover_select(chosen, caps, last, t0):
    """Merge drawn workers with forced ones; updates ``last`` in place."""
    m = chosen.shape[0]
    offsets = np.zeros(m + 1, dtype=np.int64)
    parts = []
    for j in range(m):
        t = t0 + j
        due = (t - last) >= caps
        due[chosen[j]] = True
        idx = np.flatnonzero(due)
        last[idx] = t
        parts.append(idx)
        offsets[j + 1] = offsets[j] + len(idx)
    workers = np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, dtype=np.int64)
    return offsets, workers
