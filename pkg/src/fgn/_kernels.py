"""Compiled loops for windowed attention, which dominates step time.

The kernels run sequential loops in a fixed order, so results are
bit-reproducible run to run.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def attention_fwd(q, k, v, idx, heads, scl):
    """Windowed attention core.

    q, k, v: [B, K, d]; idx: [K, J] neighbour table.
    Returns weights a [B, K, J, H] and mixed values o [B, K, d].
    """
    B, K, d = q.shape
    J = idx.shape[1]
    dh = d // heads
    a = np.empty((B, K, J, heads))
    o = np.zeros((B, K, d))
    s = np.empty(J)
    for b in range(B):
        for i in range(K):
            for h in range(heads):
                lo = h * dh
                m = -np.inf
                for j in range(J):
                    n = idx[i, j]
                    acc = 0.0
                    for e in range(lo, lo + dh):
                        acc += q[b, i, e] * k[b, n, e]
                    s[j] = acc * scl
                    if s[j] > m:
                        m = s[j]
                tot = 0.0
                for j in range(J):
                    s[j] = math.exp(s[j] - m)
                    tot += s[j]
                for j in range(J):
                    w = s[j] / tot
                    a[b, i, j, h] = w
                    n = idx[i, j]
                    for e in range(lo, lo + dh):
                        o[b, i, e] += w * v[b, n, e]
    return a, o


@njit(cache=True)
def attention_bwd(go, q, k, v, a, idx, heads, scl):
    """Cotangents of q, k, v given the cotangent ``go`` of the mixed values."""
    B, K, d = q.shape
    J = idx.shape[1]
    dh = d // heads
    gq = np.zeros((B, K, d))
    gk = np.zeros((B, K, d))
    gv = np.zeros((B, K, d))
    ga = np.empty(J)
    for b in range(B):
        for i in range(K):
            for h in range(heads):
                lo = h * dh
                dot = 0.0
                for j in range(J):
                    n = idx[i, j]
                    acc = 0.0
                    for e in range(lo, lo + dh):
                        acc += go[b, i, e] * v[b, n, e]
                    ga[j] = acc
                    dot += a[b, i, j, h] * acc
                for j in range(J):
                    n = idx[i, j]
                    w = a[b, i, j, h]
                    gs = w * (ga[j] - dot) * scl
                    for e in range(lo, lo + dh):
                        gq[b, i, e] += gs * k[b, n, e]
                        gk[b, n, e] += gs * q[b, i, e]
                        gv[b, n, e] += w * go[b, i, e]
    return gq, gk, gv


@njit(cache=True)
def _l96_tendency(x, F, out):
    K = x.shape[0]
    for k in range(K):
        out[k] = (x[(k + 1) % K] - x[(k - 2) % K]) * x[(k - 1) % K] - x[k] + F


@njit(cache=True)
def l96_advance(x, noise, dt, F, amp):
    """Advance one frame: ``noise.shape[0]`` RK4 steps with additive noise.

    x: [n, K] (modified copy returned); noise: [substeps, n, K] standard normals.
    Returns the new state and the number of the first step at which any
    site exceeded 1e6 in magnitude (-1 if none).
    """
    n, K = x.shape
    y = x.copy()
    k1 = np.empty(K)
    k2 = np.empty(K)
    k3 = np.empty(K)
    k4 = np.empty(K)
    tmp = np.empty(K)
    bad = -1
    for s in range(noise.shape[0]):
        for r in range(n):
            xr = y[r]
            _l96_tendency(xr, F, k1)
            for k in range(K):
                tmp[k] = xr[k] + 0.5 * dt * k1[k]
            _l96_tendency(tmp, F, k2)
            for k in range(K):
                tmp[k] = xr[k] + 0.5 * dt * k2[k]
            _l96_tendency(tmp, F, k3)
            for k in range(K):
                tmp[k] = xr[k] + dt * k3[k]
            _l96_tendency(tmp, F, k4)
            for k in range(K):
                xr[k] = xr[k] + (dt / 6.0) * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]) + amp * noise[s, r, k]
                if bad < 0 and not abs(xr[k]) <= 1e6:
                    bad = s
    return y, bad
