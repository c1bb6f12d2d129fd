"""Pure-NumPy trajectory kernels.

Reference semantics for the compiled kernels in ``_core.pyx``; used when
the extension is unavailable or ``EDETECT_BACKEND=python`` is set.  All
kernels take time-major ``(T, n)`` float64 arrays where column ``j`` is
one independent stream (or replication) and row ``i`` is time ``t = i + 1``.
"""

from __future__ import annotations

import numpy as np


def _as_time_major(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a (T, n) array, got shape {a.shape}")
    return a


def sr_path_log(log_increments, log_weights=None) -> np.ndarray:
    """Shiryaev-Roberts recursion in log space.

    Row ``i`` of the result holds ``log M_{i+1}`` for each column, where
    ``M_{t+1} = w_{t+1} . inc_{t+1} + inc_{t+1} . M_t`` with weights
    ``w == 1`` (``log_weights=None``, the SR e-detector started from
    ``M_0 = 0``) or per-start-time weights ``gamma_t`` (the weighted SR
    e-process).  ``-inf`` encodes a zero value.
    """
    li = _as_time_major(log_increments)
    steps, n = li.shape
    if log_weights is None:
        lw = np.zeros(steps)
    else:
        lw = np.ascontiguousarray(log_weights, dtype=np.float64)
        if lw.shape != (steps,):
            raise ValueError("log_weights must have shape (T,)")
    out = np.empty_like(li)
    state = np.full(n, -np.inf)
    for i in range(steps):
        state = li[i] + np.logaddexp(state, lw[i])
        out[i] = state
    return out


def cusum_path_log(log_increments) -> np.ndarray:
    """CUSUM recursion ``M_{t+1} = inc_{t+1} . max(M_t, 1)`` in log space."""
    li = _as_time_major(log_increments)
    steps, n = li.shape
    out = np.empty_like(li)
    state = np.full(n, -np.inf)
    for i in range(steps):
        state = li[i] + np.maximum(state, 0.0)
        out[i] = state
    return out


def conformal_pvalues(x, theta) -> np.ndarray:
    """Conformal p-value sequence for the centered-last nonconformity score.

    At time ``t`` the scores are ``a_s = x_s - mean(x_1..x_t)`` and

        p_t = (#{s <= t : a_s > a_t} + theta_t . #{s <= t : a_s == a_t}) / t

    where the tie count includes ``s == t`` itself.
    """
    xv = _as_time_major(x)
    th = _as_time_major(theta)
    if th.shape != xv.shape:
        raise ValueError("theta must match the shape of x")
    steps, n = xv.shape
    p = np.empty_like(xv)
    run_sum = np.zeros(n)
    for i in range(steps):
        run_sum = run_sum + xv[i]
        mean = run_sum / (i + 1)
        scores = xv[: i + 1] - mean
        last = scores[i]
        above = (scores > last).sum(axis=0)
        ties = (scores == last).sum(axis=0)
        p[i] = (above + th[i] * ties) / (i + 1)
    return p


def additive_sign_sr_path(x, lam, use_max=False) -> np.ndarray:
    """Sum (or max) of additive sign-betting delay processes, clipped at 0.

    Delay ``j`` starts at 1 and evolves as a walk reflected at zero:
    ``L <- max(0, L + lam * sign(x_t))`` for ``t >= j``.  Returned in the
    linear domain (values grow at most linearly per delay, so no overflow).
    """
    xv = _as_time_major(x)
    steps, n = xv.shape
    out = np.empty_like(xv)
    delays = np.empty_like(xv)
    for i in range(steps):
        delays[i] = 1.0
        step = lam * np.sign(xv[i])
        live = delays[: i + 1]
        np.maximum(live + step, 0.0, out=live)
        out[i] = live.max(axis=0) if use_max else live.sum(axis=0)
    return out
