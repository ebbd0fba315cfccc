"""Direct-loop reference implementations.

Deliberately naive: scalar loops over every output position and tap, no
shared code with the vectorised kernels they check.
"""

import math

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b_ in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for cc in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride - padding + u * dilation
                                s = j * stride - padding + v * dilation
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[b_, cc, r, s] * w[o, cc, u, v]
                    out[b_, o, i, j] = acc
    return out


def conv_transpose2d(x, w, b=None, stride=2):
    n, c, h, wd = x.shape
    _, co, k, _ = w.shape
    out = np.zeros((n, co, (h - 1) * stride + k, (wd - 1) * stride + k))
    for b_ in range(n):
        for cc in range(c):
            for i in range(h):
                for j in range(wd):
                    for o in range(co):
                        for u in range(k):
                            for v in range(k):
                                out[b_, o, i * stride + u, j * stride + v] += x[b_, cc, i, j] * w[cc, o, u, v]
    if b is not None:
        for o in range(co):
            out[:, o] += b[o]
    return out


def maxpool2d(x, k=2):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // k, w // k))
    for idx in np.ndindex(out.shape):
        b_, cc, i, j = idx
        best = -math.inf
        for u in range(k):
            for v in range(k):
                best = max(best, x[b_, cc, i * k + u, j * k + v])
        out[idx] = best
    return out


def global_avgpool(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, 1, 1))
    for b_ in range(n):
        for cc in range(c):
            out[b_, cc, 0, 0] = math.fsum(x[b_, cc].ravel().tolist()) / (h * w)
    return out


def upsample_nearest(x, scale=2):
    n, c, h, w = x.shape
    out = np.empty((n, c, h * scale, w * scale))
    for b_, cc, i, j in np.ndindex(out.shape):
        out[b_, cc, i, j] = x[b_, cc, i // scale, j // scale]
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def silu(a):
    return a / (1.0 + np.exp(-a))


def channel_gate(x, w, b):
    """sigmoid(W . mean(x) + b) one channel at a time."""
    n, c = x.shape[:2]
    out = np.empty((n, c, 1, 1))
    for b_ in range(n):
        means = [math.fsum(x[b_, cc].ravel().tolist()) / x[b_, cc].size for cc in range(c)]
        for o in range(c):
            z = b[o] + sum(w[o, cc, 0, 0] * means[cc] for cc in range(c))
            out[b_, o, 0, 0] = sigmoid(z)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)
