"""Hot loops with a numba implementation and a pure-numpy fallback.

Set ``DRONPE_DISABLE_NUMBA=1`` (or run without numba installed) to use the
numpy versions.  Both produce bit-identical results; the benchmark script in
``benchmarks/bench_kernels.py`` compares their speed.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = ["USE_NUMBA", "lv_observe", "count_less", "count_less_equal", "backend"]

STATE_FLOOR = 1e-10

USE_NUMBA = numba is not None and os.environ.get("DRONPE_DISABLE_NUMBA", "").strip().lower() not in (
    "1",
    "true",
    "yes",
)


def backend():
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# Lotka-Volterra RK4
# --------------------------------------------------------------------------

def _lv_rhs_np(a, b, c, d, X, Y):
    return a * X - b * X * Y, -c * Y + d * X * Y


def lv_observe_numpy(theta, x0, y0, dt, n_steps, stride):
    """Integrate all rows at once; returns ``(states (n, 2, n_obs), clamped (n,))``."""
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.shape[0]
    a, b, c, d = theta[:, 0], theta[:, 1], theta[:, 2], theta[:, 3]
    X = np.full(n, float(x0))
    Y = np.full(n, float(y0))
    n_obs = n_steps // stride
    out = np.empty((n, 2, n_obs))
    clamped = np.zeros(n, dtype=np.int64)
    half = 0.5 * dt
    sixth = dt / 6.0
    for step in range(1, n_steps + 1):
        k1x, k1y = _lv_rhs_np(a, b, c, d, X, Y)
        k2x, k2y = _lv_rhs_np(a, b, c, d, X + half * k1x, Y + half * k1y)
        k3x, k3y = _lv_rhs_np(a, b, c, d, X + half * k2x, Y + half * k2y)
        k4x, k4y = _lv_rhs_np(a, b, c, d, X + dt * k3x, Y + dt * k3y)
        X = X + sixth * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        Y = Y + sixth * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        bad_x = ~((X >= STATE_FLOOR) & (X < np.inf))
        bad_y = ~((Y >= STATE_FLOOR) & (Y < np.inf))
        if bad_x.any() or bad_y.any():
            X = np.where(bad_x, STATE_FLOOR, X)
            Y = np.where(bad_y, STATE_FLOOR, Y)
            clamped += bad_x | bad_y
        if step % stride == 0:
            out[:, 0, step // stride - 1] = X
            out[:, 1, step // stride - 1] = Y
    return out, clamped


def _lv_observe_rows(theta, x0, y0, dt, n_steps, stride, out, clamped):
    half = 0.5 * dt
    sixth = dt / 6.0
    for i in range(theta.shape[0]):
        a = theta[i, 0]
        b = theta[i, 1]
        c = theta[i, 2]
        d = theta[i, 3]
        X = x0
        Y = y0
        for step in range(1, n_steps + 1):
            k1x = a * X - b * X * Y
            k1y = -c * Y + d * X * Y
            Xs = X + half * k1x
            Ys = Y + half * k1y
            k2x = a * Xs - b * Xs * Ys
            k2y = -c * Ys + d * Xs * Ys
            Xs = X + half * k2x
            Ys = Y + half * k2y
            k3x = a * Xs - b * Xs * Ys
            k3y = -c * Ys + d * Xs * Ys
            Xs = X + dt * k3x
            Ys = Y + dt * k3y
            k4x = a * Xs - b * Xs * Ys
            k4y = -c * Ys + d * Xs * Ys
            X = X + sixth * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            Y = Y + sixth * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            bad = False
            if not (X >= STATE_FLOOR and X < np.inf):
                X = STATE_FLOOR
                bad = True
            if not (Y >= STATE_FLOOR and Y < np.inf):
                Y = STATE_FLOOR
                bad = True
            if bad:
                clamped[i] += 1
            if step % stride == 0:
                out[i, 0, step // stride - 1] = X
                out[i, 1, step // stride - 1] = Y


if numba is not None:
    _lv_observe_rows_jit = numba.njit(cache=True, fastmath=False)(_lv_observe_rows)
else:  # pragma: no cover
    _lv_observe_rows_jit = None


def lv_observe_numba(theta, x0, y0, dt, n_steps, stride):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    n = theta.shape[0]
    out = np.empty((n, 2, n_steps // stride))
    clamped = np.zeros(n, dtype=np.int64)
    _lv_observe_rows_jit(theta, float(x0), float(y0), float(dt), int(n_steps), int(stride), out, clamped)
    return out, clamped


def lv_observe(theta, x0, y0, dt, n_steps, stride):
    """RK4 trajectories sampled every ``stride`` steps, with the active backend."""
    if USE_NUMBA:
        return lv_observe_numba(theta, x0, y0, dt, n_steps, stride)
    return lv_observe_numpy(theta, x0, y0, dt, n_steps, stride)


# --------------------------------------------------------------------------
# rank counts
# --------------------------------------------------------------------------

def count_less_numpy(samples, ref):
    """Row-wise ``#{m : samples[i, m] < ref[i]}``."""
    return np.sum(samples < ref[:, None], axis=1)


def count_less_equal_numpy(samples, ref):
    return np.sum(samples <= ref[:, None], axis=1)


def _count_rows(samples, ref, strict, out):
    for i in range(samples.shape[0]):
        c = 0
        r = ref[i]
        for m in range(samples.shape[1]):
            v = samples[i, m]
            if v < r or (not strict and v == r):
                c += 1
        out[i] = c


if numba is not None:
    _count_rows_jit = numba.njit(cache=True)(_count_rows)
else:  # pragma: no cover
    _count_rows_jit = None


def _count_numba(samples, ref, strict):
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    out = np.empty(samples.shape[0], dtype=np.int64)
    _count_rows_jit(samples, ref, strict, out)
    return out


def count_less_numba(samples, ref):
    return _count_numba(samples, ref, True)


def count_less_equal_numba(samples, ref):
    return _count_numba(samples, ref, False)


def count_less(samples, ref):
    if USE_NUMBA:
        return count_less_numba(samples, ref)
    return count_less_numpy(samples, ref).astype(np.int64)


def count_less_equal(samples, ref):
    if USE_NUMBA:
        return count_less_equal_numba(samples, ref)
    return count_less_equal_numpy(samples, ref).astype(np.int64)
