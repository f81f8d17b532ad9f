"""NCHW tensor primitives with explicit backward passes.

Each forward returns (output, cache); the matching backward consumes the
upstream gradient and the cache. Everything is plain numpy and dtype
agnostic (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def _require(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


# --- convolution ---------------------------------------------------------------

def _im2col(x, kh, kw, stride, padding, fill=0.0):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    _require(oh >= 1 and ow >= 1, f"window {kh}x{kw} s{stride} too large for {h}x{w}")
    if padding:
        xp = np.full((n, c, h + 2 * padding, w + 2 * padding), fill, dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols, oh, ow


def _col2im(dcols, x_shape, stride, padding):
    n, c, h, w = x_shape
    kh, kw, oh, ow = dcols.shape[2], dcols.shape[3], dcols.shape[4], dcols.shape[5]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def conv2d_forward(x, w, b=None, stride=1, padding=0, groups=1):
    n, cin, _, _ = x.shape
    cout, cin_g, kh, kw = w.shape
    _require(cin == cin_g * groups,
             f"conv expects {cin_g * groups} input channels, got {cin}")
    _require(cout % groups == 0, "output channels not divisible by groups")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    cols_g = cols.reshape(n, groups, cin_g, kh, kw, oh, ow)
    w_g = w.reshape(groups, cout // groups, cin_g, kh, kw)
    y = np.einsum("ngcijhw,gocij->ngohw", cols_g, w_g, optimize=True)
    y = np.ascontiguousarray(y.reshape(n, cout, oh, ow))
    if b is not None:
        y += b[None, :, None, None]
    cache = (x.shape, w, b is not None, stride, padding, groups, cols_g)
    return y, cache


def conv2d_backward(dy, cache):
    x_shape, w, has_b, stride, padding, groups, cols_g = cache
    n = x_shape[0]
    cout, cin_g, kh, kw = w.shape
    oh, ow = dy.shape[2], dy.shape[3]
    dy_g = dy.reshape(n, groups, cout // groups, oh, ow)
    dw = np.einsum("ngohw,ngcijhw->gocij", dy_g, cols_g, optimize=True).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3)) if has_b else None
    w_g = w.reshape(groups, cout // groups, cin_g, kh, kw)
    dcols = np.einsum("ngohw,gocij->ngcijhw", dy_g, w_g, optimize=True)
    dcols = dcols.reshape(n, x_shape[1], kh, kw, oh, ow)
    dx = _col2im(dcols, x_shape, stride, padding)
    return dx, dw, db


def conv2d_reference(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct six-loop convolution; the oracle the fast path is checked against."""
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    y = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    cpg = cout // groups
    for b_i in range(n):
        for o in range(cout):
            g = o // cpg
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[b_i, g * cin_g + ci, oy * stride + ky,
                                           ox * stride + kx]
                                        * w[o, ci, ky, kx])
                    y[b_i, o, oy, ox] = acc
    if b is not None:
        y += b[None, :, None, None]
    return y


# --- pooling -------------------------------------------------------------------

def maxpool_forward(x, kernel, stride, padding=0):
    fill = -np.inf if padding else 0.0
    cols, oh, ow = _im2col(x, kernel, kernel, stride, padding, fill=fill)
    n, c = x.shape[0], x.shape[1]
    flat = cols.reshape(n, c, kernel * kernel, oh, ow)
    arg = flat.argmax(axis=2)
    y = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    cache = (x.shape, kernel, stride, padding, arg, oh, ow)
    return y, cache


def maxpool_backward(dy, cache):
    x_shape, kernel, stride, padding, arg, oh, ow = cache
    n, c = x_shape[0], x_shape[1]
    dcols = np.zeros((n, c, kernel * kernel, oh, ow), dtype=dy.dtype)
    np.put_along_axis(dcols, arg[:, :, None], dy[:, :, None], axis=2)
    dcols = dcols.reshape(n, c, kernel, kernel, oh, ow)
    return _col2im(dcols, x_shape, stride, padding)


def avgpool_forward(x, kernel, stride, padding=0):
    cols, oh, ow = _im2col(x, kernel, kernel, stride, padding)
    y = cols.mean(axis=(2, 3))
    cache = (x.shape, kernel, stride, padding, oh, ow)
    return y, cache


def avgpool_backward(dy, cache):
    x_shape, kernel, stride, padding, oh, ow = cache
    n, c = x_shape[0], x_shape[1]
    share = dy / (kernel * kernel)
    dcols = np.broadcast_to(share[:, :, None, None],
                            (n, c, kernel, kernel, oh, ow)).astype(dy.dtype)
    return _col2im(dcols, x_shape, stride, padding)


def global_avgpool_forward(x):
    y = x.mean(axis=(2, 3), keepdims=True)
    return y, x.shape


def global_avgpool_backward(dy, x_shape):
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (h * w), x_shape).astype(dy.dtype)


# --- normalization ---------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      eps=1e-5, momentum=0.1, training=True):
    """Returns (y, cache, (new_running_mean, new_running_var))."""
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * m / (m - 1) if m > 1 else var
        new_rm = (1 - momentum) * running_mean + momentum * mean
        new_rv = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv, gamma, training)
    return y, cache, (new_rm, new_rv)


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, training = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if training:
        mu1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mu2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        dx = inv[None, :, None, None] * (dxhat - mu1 - xhat * mu2)
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx, dgamma, dbeta


# --- elementwise -----------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def relu6_forward(x):
    y = np.minimum(np.maximum(x, 0), 6)
    mask = (x > 0) & (x < 6)
    return y, mask


def relu6_backward(dy, mask):
    return dy * mask


def sigmoid_forward(x):
    y = 1.0 / (1.0 + np.exp(-x))
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def silu_forward(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_backward(dy, cache):
    x, s = cache
    return dy * (s + x * s * (1.0 - s))


def add_forward(a, b):
    _require(a.shape == b.shape, f"add of unequal shapes {a.shape} vs {b.shape}")
    return a + b, None


def add_backward(dy, _cache):
    return dy, dy


def mul_forward(a, b):
    _require(a.shape == b.shape, f"mul of unequal shapes {a.shape} vs {b.shape}")
    return a * b, (a, b)


def mul_backward(dy, cache):
    a, b = cache
    return dy * b, dy * a


def concat_forward(tensors, axis=1):
    first = tensors[0]
    for t in tensors[1:]:
        _require(t.shape[0] == first.shape[0] and t.shape[2:] == first.shape[2:],
                 "concat inputs disagree on n/h/w")
    sizes = [t.shape[axis] for t in tensors]
    return np.concatenate(tensors, axis=axis), (sizes, axis)


def concat_backward(dy, cache):
    sizes, axis = cache
    splits = np.cumsum(sizes)[:-1]
    return np.split(dy, splits, axis=axis)


def upsample_nearest_forward(x, factor):
    y = x.repeat(factor, axis=2).repeat(factor, axis=3)
    return y, (x.shape, factor)


def upsample_nearest_backward(dy, cache):
    x_shape, f = cache
    n, c, h, w = x_shape
    return dy.reshape(n, c, h, f, w, f).sum(axis=(3, 5))


# --- fully connected --------------------------------------------------------------

def fc_forward(x, w, b=None):
    """x: (n, in), w: (out, in)."""
    _require(x.ndim == 2 and x.shape[1] == w.shape[1],
             f"fc expects (n, {w.shape[1]}), got {x.shape}")
    y = x @ w.T
    if b is not None:
        y += b[None, :]
    return y, (x, w, b is not None)


def fc_backward(dy, cache):
    x, w, has_b = cache
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0) if has_b else None
    return dx, dw, db
