# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; see ``siag._pykernels`` for the contract."""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite, sqrt

cnp.import_array()

DEF SGD = 2
DEF IAG = 1
DEF DIVERGENCE_NORM = 1e9


def run_chunk(int method, double[::1] w, double[:, ::1] slots, double[::1] rs,
              cnp.int64_t[::1] stamps, const double[:, ::1] w_local, const double[::1] w_star,
              const cnp.int64_t[::1] offsets, const cnp.int64_t[::1] workers,
              const double[:, ::1] draws, const double[::1] etas, cnp.int64_t t0,
              double noise_std, int p, bint divide_by_active, double[::1] gaps,
              w_hist, g_hist):
    cdef Py_ssize_t n = slots.shape[0], d = slots.shape[1]
    cdef Py_ssize_t m = etas.shape[0]
    cdef double[:, ::1] wh = w_hist if w_hist is not None else np.zeros((0, d))
    cdef double[:, ::1] gh = g_hist if g_hist is not None else np.zeros((0, d))
    cdef bint record_w = wh.shape[0] > 0
    cdef bint record_g = gh.shape[0] > 0
    cdef double[::1] g = np.zeros(d)
    cdef double[::1] agg_buf = np.zeros(d)
    cdef double[::1] resid = np.zeros(p)
    cdef Py_ssize_t j, r, i, k, q, lo, hi, pd = p * d
    cdef double c, s, y, acc, divisor, nrm
    cdef int status = -1

    with nogil:
        if record_w:
            for k in range(d):
                wh[0, k] = w[k]
        for j in range(m):
            lo = offsets[j]
            hi = offsets[j + 1]
            if method == SGD:
                for k in range(d):
                    agg_buf[k] = 0.0
            for r in range(lo, hi):
                i = workers[r]
                if method == IAG:
                    for k in range(d):
                        g[k] = p * (w[k] - w_local[i, k])
                else:
                    # residual A w - (A w_i* + noise_std * eps), then A^T residual
                    for q in range(p):
                        s = 0.0
                        for k in range(d):
                            s = s + draws[r, q * d + k] * w_local[i, k]
                        y = s + noise_std * draws[r, pd + q]
                        acc = 0.0
                        for k in range(d):
                            acc = acc + draws[r, q * d + k] * w[k]
                        resid[q] = acc - y
                    for k in range(d):
                        acc = 0.0
                        for q in range(p):
                            acc = acc + draws[r, q * d + k] * resid[q]
                        g[k] = acc
                if method == SGD:
                    for k in range(d):
                        agg_buf[k] = agg_buf[k] + g[k]
                else:
                    for k in range(d):
                        rs[k] = (rs[k] - slots[i, k]) + g[k]
                        slots[i, k] = g[k]
                    stamps[i] = t0 + j
            if method == SGD:
                divisor = (hi - lo) if divide_by_active else n
                c = etas[j] / divisor
                for k in range(d):
                    if record_g:
                        gh[j, k] = agg_buf[k]
                    w[k] = w[k] - c * agg_buf[k]
            else:
                c = etas[j] / n
                for k in range(d):
                    if record_g:
                        gh[j, k] = rs[k]
                    w[k] = w[k] - c * rs[k]
            acc = 0.0
            nrm = 0.0
            for k in range(d):
                s = w[k] - w_star[k]
                acc = acc + s * s
                nrm = nrm + w[k] * w[k]
            gaps[j] = acc
            if not isfinite(acc) or sqrt(nrm) > DIVERGENCE_NORM:
                status = <int>j
                break
            if record_w:
                for k in range(d):
                    wh[j + 1, k] = w[k]
    return status


def cover_select(const cnp.int64_t[:, ::1] chosen, const cnp.int64_t[::1] caps,
                 cnp.int64_t[::1] last, cnp.int64_t t0):
    cdef Py_ssize_t m = chosen.shape[0], kk = chosen.shape[1], n = caps.shape[0]
    offsets_arr = np.zeros(m + 1, dtype=np.int64)
    out_arr = np.empty(m * n, dtype=np.int64)
    mark_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef cnp.int64_t[::1] out = out_arr
    cdef unsigned char[::1] mark = mark_arr
    cdef Py_ssize_t j, c, i, pos = 0
    cdef cnp.int64_t t
    with nogil:
        for j in range(m):
            t = t0 + j
            for c in range(kk):
                mark[chosen[j, c]] = 1
            for i in range(n):
                if mark[i] or t - last[i] >= caps[i]:
                    out[pos] = i
                    pos += 1
                    last[i] = t
                    mark[i] = 0
            offsets[j + 1] = pos
    return offsets_arr, out_arr[:pos].copy()
