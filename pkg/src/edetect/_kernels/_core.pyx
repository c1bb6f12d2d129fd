# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled trajectory kernels.

Semantics are defined by the pure-NumPy reference in ``_fallback.py``;
tests/test_kernels.py enforces agreement between the two backends.
"""

from libc.math cimport exp, log1p, INFINITY
import numpy as np

# log(2), matching the constant NumPy's logaddexp uses for the x == y branch
cdef double LOGE2 = 0.693147180559945286227


cdef inline double _logaddexp(double x, double y) nogil:
    cdef double tmp
    if x == y:
        return x + LOGE2
    tmp = x - y
    if tmp > 0.0:
        return x + log1p(exp(-tmp))
    elif tmp <= 0.0:
        return y + log1p(exp(tmp))
    return tmp  # nan propagation


def sr_path_log(log_increments, log_weights=None):
    cdef double[:, ::1] li = np.ascontiguousarray(log_increments, dtype=np.float64)
    cdef Py_ssize_t steps = li.shape[0]
    cdef Py_ssize_t n = li.shape[1]
    if log_weights is None:
        lw_arr = np.zeros(steps)
    else:
        lw_arr = np.ascontiguousarray(log_weights, dtype=np.float64)
        if lw_arr.shape != (steps,):
            raise ValueError("log_weights must have shape (T,)")
    cdef double[::1] lw = lw_arr
    out_arr = np.empty((steps, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] state = np.full(n, -INFINITY)
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(steps):
            for j in range(n):
                state[j] = li[i, j] + _logaddexp(state[j], lw[i])
                out[i, j] = state[j]
    return out_arr


def cusum_path_log(log_increments):
    cdef double[:, ::1] li = np.ascontiguousarray(log_increments, dtype=np.float64)
    cdef Py_ssize_t steps = li.shape[0]
    cdef Py_ssize_t n = li.shape[1]
    out_arr = np.empty((steps, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] state = np.full(n, -INFINITY)
    cdef Py_ssize_t i, j
    cdef double prev
    with nogil:
        for i in range(steps):
            for j in range(n):
                prev = state[j]
                if prev < 0.0:
                    prev = 0.0
                state[j] = li[i, j] + prev
                out[i, j] = state[j]
    return out_arr


def conformal_pvalues(x, theta):
    # transposed layout (stream-major) keeps the history scan contiguous
    cdef double[:, ::1] xv = np.ascontiguousarray(
        np.asarray(x, dtype=np.float64).T)
    cdef double[:, ::1] th = np.ascontiguousarray(
        np.asarray(theta, dtype=np.float64).T)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t steps = xv.shape[1]
    if th.shape[0] != n or th.shape[1] != steps:
        raise ValueError("theta must match the shape of x")
    p_arr = np.empty((n, steps), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef Py_ssize_t i, j, s
    cdef double run_sum, mean, last, a
    cdef Py_ssize_t above, ties
    with nogil:
        for j in range(n):
            run_sum = 0.0
            for i in range(steps):
                run_sum += xv[j, i]
                mean = run_sum / (i + 1)
                last = xv[j, i] - mean
                above = 0
                ties = 0
                for s in range(i + 1):
                    a = xv[j, s] - mean
                    if a > last:
                        above += 1
                    elif a == last:
                        ties += 1
                p[j, i] = (above + th[j, i] * ties) / (i + 1)
    return np.ascontiguousarray(p_arr.T)


def additive_sign_sr_path(x, double lam, bint use_max=False):
    # transposed layout (stream-major) keeps the delay sweep contiguous
    cdef double[:, ::1] xv = np.ascontiguousarray(
        np.asarray(x, dtype=np.float64).T)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t steps = xv.shape[1]
    out_arr = np.empty((n, steps), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] delays = np.empty(steps, dtype=np.float64)
    cdef Py_ssize_t i, j, r
    cdef double step, v, acc
    with nogil:
        for j in range(n):
            for i in range(steps):
                delays[i] = 1.0
                if xv[j, i] > 0.0:
                    step = lam
                elif xv[j, i] < 0.0:
                    step = -lam
                else:
                    step = 0.0
                acc = 0.0
                for r in range(i + 1):
                    v = delays[r] + step
                    if v < 0.0:
                        v = 0.0
                    delays[r] = v
                    if use_max:
                        if v > acc:
                            acc = v
                    else:
                        acc += v
                out[j, i] = acc
    return np.ascontiguousarray(out_arr.T)
