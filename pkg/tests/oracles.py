"""Brute-force reference implementations used only by the tests."""
import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    c, h, wd = x.shape
    o, ci, ky, kx = w.shape
    assert ci == c
    oy = (h + 2 * padding - ky) // stride + 1
    ox = (wd + 2 * padding - kx) // stride + 1
    out = np.zeros((o, oy, ox))
    for oc in range(o):
        for yy in range(oy):
            for xx in range(ox):
                acc = float(b[oc])
                for ic in range(c):
                    for i in range(ky):
                        for j in range(kx):
                            sy = yy * stride + i - padding
                            sx = xx * stride + j - padding
                            if 0 <= sy < h and 0 <= sx < wd:
                                acc += float(x[ic, sy, sx]) * float(w[oc, ic, i, j])
                out[oc, yy, xx] = acc
    return out


def dense_loops(x, w, b):
    m, n = w.shape
    return np.array([float(b[i]) + sum(float(w[i, j]) * float(x[j]) for j in range(n)) for i in range(m)])


def maxpool_loops(x, window, stride):
    c, h, w = x.shape
    oy = (h - window) // stride + 1
    ox = (w - window) // stride + 1
    out = np.zeros((c, oy, ox), dtype=x.dtype)
    for ch in range(c):
        for i in range(oy):
            for j in range(ox):
                best = -math.inf
                for a in range(window):
                    for bb in range(window):
                        best = max(best, x[ch, i * stride + a, j * stride + bb])
                out[ch, i, j] = best
    return out


def batchnorm_loops(x, gamma, beta, mean, var, eps):
    out = np.zeros(x.shape)
    for c in range(x.shape[0]):
        denom = math.sqrt(float(var[c]) + eps)
        for idx, v in np.ndenumerate(x[c]):
            out[(c,) + idx] = float(gamma[c]) * (float(v) - float(mean[c])) / denom + float(beta[c])
    return out


def softmax_mpmath(z):
    import mpmath

    mpmath.mp.dps = 50
    ex = [mpmath.e ** mpmath.mpf(float(v)) for v in z]
    s = mpmath.fsum(ex)
    return np.array([float(e / s) for e in ex])


def relerr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(b), 1.0)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def rank_oracle(p, c):
    """Sort class indices by (-p, index) and report the 1-based position of c."""
    order = sorted(range(len(p)), key=lambda k: (-p[k], k))
    return order.index(c) + 1


def cut_oracle(keys, parts):
    """Quantile cut: assign sorted position i of n to the part whose cumulative
    boundary it falls under, with the larger parts first."""
    n = len(keys)
    order = sorted(range(n), key=lambda i: keys[i])
    bounds = []
    acc = 0
    for p in range(parts):
        acc += n // parts + (1 if p < n % parts else 0)
        bounds.append(acc)
    out = [0] * n
    for pos, i in enumerate(order):
        out[i] = next(p for p, bnd in enumerate(bounds) if pos < bnd)
    return out
