"""Floating-point NHWC kernels.

Kernels compute in the dtype of their input, so the trainer can run them in
float64 for gradient checks while inference uses float32.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..graph import resolve_padding


def pad_nhwc(x: np.ndarray, pads, value=0):
    (pt, pb), (pl, pr) = pads
    if not (pt or pb or pl or pr):
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=value)


def spatial_pads(x_shape, kh, kw, stride, pad, ceil=False):
    """((pt, pb), (pl, pr)), (oh, ow) for an NHWC input."""
    pt, pb, oh = resolve_padding(x_shape[1], kh, stride, pad, ceil)
    pl, pr, ow = resolve_padding(x_shape[2], kw, stride, pad, ceil)
    return ((pt, pb), (pl, pr)), (oh, ow)


def windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Read-only strided view of shape (N, OH, OW, kh, kw, C) over a padded input."""
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        (n, oh, ow, kh, kw, c),
        (sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def im2col(x, kh, kw, stride, pad, pad_value=0):
    """Patch matrix (N*OH*OW, kh*kw*C) plus the output spatial shape."""
    pads, (oh, ow) = spatial_pads(x.shape, kh, kw, stride, pad)
    xp = pad_nhwc(x, pads, pad_value)
    cols = windows(xp, kh, kw, stride, oh, ow).reshape(x.shape[0] * oh * ow, -1)
    return cols, (oh, ow)


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    n = x.shape[0]
    kh, kw, cin_g, cout = w.shape
    if groups == 1:
        cols, (oh, ow) = im2col(x, kh, kw, stride, pad)
        y = cols @ w.reshape(-1, cout).astype(x.dtype, copy=False)
    else:
        cout_g = cout // groups
        parts = []
        for g in range(groups):
            xs = x[..., g * cin_g : (g + 1) * cin_g]
            cols, (oh, ow) = im2col(xs, kh, kw, stride, pad)
            wg = w[..., g * cout_g : (g + 1) * cout_g].reshape(-1, cout_g).astype(x.dtype, copy=False)
            parts.append(cols @ wg)
        y = np.concatenate(parts, axis=1)
    y = y.reshape(n, oh, ow, cout)
    if b is not None:
        y = y + b.astype(x.dtype, copy=False)
    return y


def depthwise_conv2d(x, w, b=None, stride=1, pad=0):
    kh, kw, _, c = w.shape
    pads, (oh, ow) = spatial_pads(x.shape, kh, kw, stride, pad)
    xp = pad_nhwc(x, pads)
    win = windows(xp, kh, kw, stride, oh, ow)
    w = w.astype(x.dtype, copy=False)
    y = np.zeros((x.shape[0], oh, ow, c), dtype=x.dtype)
    # fixed accumulation order over kernel taps
    for i in range(kh):
        for j in range(kw):
            y += win[:, :, :, i, j, :] * w[i, j, 0]
    if b is not None:
        y = y + b.astype(x.dtype, copy=False)
    return y


def fc(x, w, b=None):
    y = x.reshape(x.shape[0], -1) @ w.astype(x.dtype, copy=False)
    if b is not None:
        y = y + b.astype(x.dtype, copy=False)
    return y


def batchnorm(x, gamma, beta, mean, var, eps):
    dt = x.dtype
    k = (gamma / np.sqrt(var.astype(np.float64) + eps)).astype(dt)
    return (x - mean.astype(dt)) * k + beta.astype(dt)


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu6(x):
    return np.clip(x, 0, 6).astype(x.dtype, copy=False)


def sigmoid(x):
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def silu(x):
    return x * sigmoid(x)


def maxpool(x, k, stride, pad=0, ceil=False):
    pads, (oh, ow) = spatial_pads(x.shape, k, k, stride, pad, ceil)
    xp = pad_nhwc(x, pads, -np.inf)
    return windows(xp, k, k, stride, oh, ow).max(axis=(3, 4))


def avgpool(x, k, stride):
    pads, (oh, ow) = spatial_pads(x.shape, k, k, stride, 0)
    win = windows(pad_nhwc(x, pads), k, k, stride, oh, ow)
    return win.mean(axis=(3, 4), dtype=_acc_dtype(x)).astype(x.dtype, copy=False)


def global_avgpool(x):
    return x.mean(axis=(1, 2), keepdims=True, dtype=_acc_dtype(x)).astype(x.dtype, copy=False)


def _acc_dtype(x):
    # means cancel badly in f32; accumulate wider and round once
    return np.float64 if x.dtype.itemsize <= 8 else x.dtype


def add(a, b):
    return a + b


def concat(xs, axis=3):
    return np.concatenate(xs, axis=axis)


def softmax(x):
    x = x.reshape(x.shape[0], -1)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def squeeze_excite(x, w1, b1, w2, b2):
    s = global_avgpool(x).reshape(x.shape[0], -1)
    h = silu(s @ w1.astype(x.dtype, copy=False) + b1.astype(x.dtype, copy=False))
    gate = sigmoid(h @ w2.astype(x.dtype, copy=False) + b2.astype(x.dtype, copy=False))
    return x * gate[:, None, None, :]
