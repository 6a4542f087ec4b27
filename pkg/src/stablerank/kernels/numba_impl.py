"""Numba-jitted implementations of the hot numeric kernels.

Same contracts as :mod:`stablerank.kernels.numpy_impl`. Loops accumulate
sequentially in row-major order, which is the package's documented
reduction order; each kernel is deterministic for fixed inputs.
Compilation is cached on disk (``cache=True``), so the first call per
dtype pays the jit cost once per environment.
"""

import math

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def masked_softmax_fwd(logits, mask):
    h, q, k = logits.shape
    out = np.zeros_like(logits)
    for a in range(h):
        for t in range(q):
            m = -np.inf
            for u in range(k):
                if mask[t, u] and logits[a, t, u] > m:
                    m = logits[a, t, u]
            s = 0.0
            for u in range(k):
                if mask[t, u]:
                    e = math.exp(logits[a, t, u] - m)
                    out[a, t, u] = e
                    s += e
            for u in range(k):
                if mask[t, u]:
                    out[a, t, u] /= s
    return out


@njit(cache=True)
def masked_softmax_bwd(probs, dprobs):
    h, q, k = probs.shape
    dlogits = np.empty_like(probs)
    for a in range(h):
        for t in range(q):
            inner = 0.0
            for u in range(k):
                inner += probs[a, t, u] * dprobs[a, t, u]
            for u in range(k):
                dlogits[a, t, u] = probs[a, t, u] * (dprobs[a, t, u] - inner)
    return dlogits


@njit(cache=True)
def rope_fwd(x, positions, inv_freq):
    h, s, d = x.shape
    half = d // 2
    out = np.empty_like(x)
    for t in range(s):
        p = float(positions[t])
        for j in range(half):
            ang = p * inv_freq[j]
            c = math.cos(ang)
            sn = math.sin(ang)
            for a in range(h):
                x0 = x[a, t, 2 * j]
                x1 = x[a, t, 2 * j + 1]
                out[a, t, 2 * j] = x0 * c - x1 * sn
                out[a, t, 2 * j + 1] = x0 * sn + x1 * c
    return out


@njit(cache=True)
def rope_bwd(dout, positions, inv_freq):
    h, s, d = dout.shape
    half = d // 2
    dx = np.empty_like(dout)
    for t in range(s):
        p = float(positions[t])
        for j in range(half):
            ang = p * inv_freq[j]
            c = math.cos(ang)
            sn = math.sin(ang)
            for a in range(h):
                d0 = dout[a, t, 2 * j]
                d1 = dout[a, t, 2 * j + 1]
                dx[a, t, 2 * j] = d0 * c + d1 * sn
                dx[a, t, 2 * j + 1] = -d0 * sn + d1 * c
    return dx


@njit(cache=True)
def rms_norm_fwd(x, gain, eps):
    s, d = x.shape
    out = np.empty_like(x)
    inv_rms = np.empty(s, dtype=x.dtype)
    for t in range(s):
        ms = 0.0
        for j in range(d):
            ms += x[t, j] * x[t, j]
        r = 1.0 / math.sqrt(ms / d + eps)
        inv_rms[t] = r
        for j in range(d):
            out[t, j] = x[t, j] * r * gain[j]
    return out, inv_rms


@njit(cache=True)
def rms_norm_bwd(dout, x, gain, inv_rms):
    s, d = x.shape
    dx = np.empty_like(x)
    dgain = np.zeros_like(gain)
    for t in range(s):
        r = inv_rms[t]
        xg = 0.0
        for j in range(d):
            xg += x[t, j] * dout[t, j] * gain[j]
        coef = r * r * r * xg / d
        for j in range(d):
            dx[t, j] = r * dout[t, j] * gain[j] - x[t, j] * coef
            dgain[j] += dout[t, j] * x[t, j] * r
    return dx, dgain


@njit(cache=True)
def log_softmax_fwd(x):
    s, v = x.shape
    out = np.empty_like(x)
    for t in range(s):
        m = x[t, 0]
        for j in range(1, v):
            if x[t, j] > m:
                m = x[t, j]
        acc = 0.0
        for j in range(v):
            acc += math.exp(x[t, j] - m)
        lse = math.log(acc)
        for j in range(v):
            out[t, j] = x[t, j] - m - lse
    return out


@njit(cache=True)
def log_softmax_bwd(y, dy):
    s, v = y.shape
    dx = np.empty_like(y)
    for t in range(s):
        total = 0.0
        for j in range(v):
            total += dy[t, j]
        for j in range(v):
            dx[t, j] = dy[t, j] - math.exp(y[t, j]) * total
    return dx
