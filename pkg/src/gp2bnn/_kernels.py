"""Fused elementwise loops for the hot activation paths.

Each kernel works on flat float64 arrays and returns values identical (to
rounding) to the vectorised numpy code in :mod:`gp2bnn.activations`.
"""

from __future__ import annotations

import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi

# fast-math without the no-NaN / no-Inf assumptions: exp may overflow to inf for huge inputs
FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}

# inner nonlinearity codes for the one-hidden-layer MLP activation
INNER_CODES = {"silu": 0, "tanh": 1, "relu": 2, "rbf": 3}


@numba.njit(cache=True, fastmath=FAST, inline="always")
def _inner(z, code):
    if code == 0:
        s = 1.0 / (1.0 + math.exp(-z))
        return z * s, s + z * s * (1.0 - s)
    if code == 1:
        t = math.tanh(z)
        return t, 1.0 - t * t
    if code == 2:
        return (z, 1.0) if z > 0.0 else (0.0, 0.0)
    e = math.exp(-z * z)
    return e, -2.0 * z * e


@numba.njit(cache=True, fastmath=FAST)
def mlp1_value(x, w1, b1, w2, b2, code):
    out = np.empty(x.size)
    m = w1.size
    for i in range(x.size):
        acc = b2
        xi = x[i]
        for j in range(m):
            a, _ = _inner(w1[j] * xi + b1[j], code)
            acc += w2[j] * a
        out[i] = acc
    return out


@numba.njit(cache=True, fastmath=FAST)
def mlp1_vjp(x, g, w1, b1, w2, code):
    """Returns ``(g * phi'(x), g_w1, g_b1, g_w2, g_b2)``."""
    m = w1.size
    gx = np.empty(x.size)
    gw1 = np.zeros(m)
    gb1 = np.zeros(m)
    gw2 = np.zeros(m)
    gb2 = 0.0
    for i in range(x.size):
        xi = x[i]
        gi = g[i]
        gb2 += gi
        acc = 0.0
        for j in range(m):
            a, da = _inner(w1[j] * xi + b1[j], code)
            gw2[j] += gi * a
            d = gi * w2[j] * da
            gb1[j] += d
            gw1[j] += d * xi
            acc += w2[j] * w1[j] * da
        gx[i] = gi * acc
    return gx, gw1, gb1, gw2, gb2


@numba.njit(cache=True, fastmath=FAST)
def mlp1_deriv(x, w1, b1, w2, code):
    out = np.empty(x.size)
    for i in range(x.size):
        acc = 0.0
        for j in range(w1.size):
            _, da = _inner(w1[j] * x[i] + b1[j], code)
            acc += w2[j] * w1[j] * da
        out[i] = acc
    return out


@numba.njit(cache=True, fastmath=FAST)
def fourier_value(x, fc, fs, ac, as_):
    out = np.empty(x.size)
    K = fc.size
    for i in range(x.size):
        t = TWO_PI * x[i]
        acc = 0.0
        for k in range(K):
            acc += ac[k] * math.cos(fc[k] * t) + as_[k] * math.sin(fs[k] * t)
        out[i] = acc
    return out


@numba.njit(cache=True, fastmath=FAST)
def fourier_vjp(x, g, fc, fs, ac, as_):
    """Returns ``(g * phi'(x), g_fc, g_fs, g_ac, g_as)``."""
    K = fc.size
    gx = np.empty(x.size)
    gfc = np.zeros(K)
    gfs = np.zeros(K)
    gac = np.zeros(K)
    gas = np.zeros(K)
    for i in range(x.size):
        t = TWO_PI * x[i]
        gi = g[i]
        acc = 0.0
        for k in range(K):
            c = math.cos(fc[k] * t)
            sc = math.sin(fc[k] * t)
            cs = math.cos(fs[k] * t)
            ss = math.sin(fs[k] * t)
            gac[k] += gi * c
            gas[k] += gi * ss
            gfc[k] -= gi * ac[k] * sc * t
            gfs[k] += gi * as_[k] * cs * t
            acc += -ac[k] * fc[k] * sc + as_[k] * fs[k] * cs
        gx[i] = gi * TWO_PI * acc
    return gx, gfc, gfs, gac, gas
