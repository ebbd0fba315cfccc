"""Forward and adjoint numpy kernels over NCHW arrays.

Convolutions gather every kernel tap as a strided view of the padded input
and contract taps and channels in a single ``tensordot``; the input gradient
scatters per-tap contributions back through the same slices.
"""

import numpy as np


def conv_out_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tap(i, dilation, stride, n_out):
    start = i * dilation
    return slice(start, start + stride * (n_out - 1) + 1, stride)


def _pad(x, padding):
    if not padding:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def _gather(xp, kh, kw, stride, dilation, ho, wo):
    """All kernel taps of a padded input: (kh*kw, n, c, ho, wo)."""
    return np.stack([xp[:, :, _tap(i, dilation, stride, ho), _tap(j, dilation, stride, wo)]
                     for i in range(kh) for j in range(kw)])


def conv2d(x, w, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {ci}")
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo} for input {h}x{wd}")
    taps = _gather(_pad(x, padding), kh, kw, stride, dilation, ho, wo)
    out = np.tensordot(w.reshape(co, ci, kh * kw), taps, axes=([1, 2], [2, 0]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_grad_input(g, w, x_shape, stride=1, padding=0, dilation=1):
    n, c, h, wd = x_shape
    co, ci, kh, kw = w.shape
    ho, wo = g.shape[2:]
    # (ci, kh*kw, n, ho, wo): per-tap contributions, scattered back below
    contrib = np.tensordot(w.reshape(co, ci, kh * kw), g, axes=([0], [1]))
    gx = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        rows = _tap(i, dilation, stride, ho)
        for j in range(kw):
            gx[:, :, rows, _tap(j, dilation, stride, wo)] += contrib[:, i * kw + j]
    gx = gx.transpose(1, 0, 2, 3)
    if padding:
        gx = gx[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gx)


def conv2d_grad_weight(g, x, w_shape, stride=1, padding=0, dilation=1):
    co, ci, kh, kw = w_shape
    ho, wo = g.shape[2:]
    taps = _gather(_pad(x, padding), kh, kw, stride, dilation, ho, wo)
    gw = np.tensordot(g, taps, axes=([0, 2, 3], [1, 3, 4]))  # (co, kh*kw, ci)
    return np.ascontiguousarray(gw.transpose(0, 2, 1).reshape(w_shape))


def conv_transpose2d(x, w, stride=2):
    """Transposed conv; weights are (in, out, k, k), output (h-1)*stride + k."""
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weights expect {ci}")
    out = np.zeros((co, n, (h - 1) * stride + kh, (wd - 1) * stride + kw), dtype=x.dtype)
    for i in range(kh):
        rows = _tap(i, 1, stride, h)
        for j in range(kw):
            cols = _tap(j, 1, stride, wd)
            out[:, :, rows, cols] += np.tensordot(w[:, :, i, j], x, axes=([0], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv_transpose2d_grad_input(g, w, stride=2):
    # Adjoint of a transposed conv is the plain strided conv with the same taps.
    return conv2d(g, w, stride=stride)


def conv_transpose2d_grad_weight(g, x, w_shape, stride=2):
    _, _, kh, kw = w_shape
    h, wd = x.shape[2:]
    gw = np.empty(w_shape, dtype=g.dtype)
    for i in range(kh):
        rows = _tap(i, 1, stride, h)
        for j in range(kw):
            cols = _tap(j, 1, stride, wd)
            gw[:, :, i, j] = np.tensordot(x, g[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))
    return gw


def _windows(x, k):
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(n, c, h // k, w // k, k * k)


def maxpool2d(x, kernel=2):
    """Non-overlapping max pool (stride == kernel). Returns (out, argmax)."""
    h, w = x.shape[2:]
    if h % kernel or w % kernel:
        raise ValueError(f"maxpool2d: spatial size {h}x{w} not divisible by {kernel}")
    win = _windows(x, kernel)
    # np.argmax returns the first maximum, i.e. row-major tie-break.
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool2d_grad(g, idx, x_shape, kernel=2):
    n, c, h, w = x_shape
    win = np.zeros(idx.shape + (kernel * kernel,), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, h // kernel, w // kernel, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(x_shape))


def global_avgpool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avgpool_grad(g, x_shape):
    h, w = x_shape[2:]
    return np.broadcast_to(g / (h * w), x_shape).copy()


def upsample_nearest(x, scale=2):
    return x.repeat(scale, axis=2).repeat(scale, axis=3)


def upsample_nearest_grad(g, scale=2):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // scale, scale, w // scale, scale).sum(axis=(3, 5))


def sigmoid(x):
    # Stable in both tails, then clamped so the result stays strictly inside (0, 1).
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    fi = np.finfo(x.dtype)
    return np.clip(s, fi.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)))


def silu(x):
    return x * sigmoid(x)


def silu_grad(g, x):
    s = sigmoid(x)
    return g * (s + x * s * (1 - s))
