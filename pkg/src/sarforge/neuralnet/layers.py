"""Forward/backward kernels on NHWC arrays.

Every forward returns ``(out, cache)``; the matching backward takes the
upstream gradient and the cache. Works in float32 or float64, following the
input dtype.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def _check_conv(x, w, b):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and (kh, kw, cin, cout) weights, got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input channels {x.shape} do not match weights {w.shape}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match weights {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same padding needs odd kernels, got {w.shape}")


def conv2d_forward(x, w, b):
    """Same-padded stride-1 convolution (cross-correlation) with zero borders."""
    _check_conv(x, w, b)
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    if kh == 1 and kw == 1:
        cols = x
    else:
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        cols = np.concatenate(
            [xp[:, i : i + h, j : j + wd, :] for i in range(kh) for j in range(kw)], axis=3
        )
    out = cols.reshape(-1, kh * kw * cin) @ w.reshape(-1, cout) + b
    return out.reshape(n, h, wd, cout), (cols, x.shape, w)


def conv2d_backward(dout, cache):
    cols, xshape, w = cache
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = xshape
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, kh * kw * cin).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, h, wd, kh * kw, cin)
    if kh == 1 and kw == 1:
        return dcols.reshape(xshape), dw, db
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((n, h + 2 * ph, wd + 2 * pw, cin), dtype=dout.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, ph : ph + h, pw : pw + wd, :], dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    # derivative at exactly 0 is 0
    return dout * mask


def maxpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {x.shape}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=4)
    out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    return out, (arg, x.shape)


def maxpool2_backward(dout, cache):
    arg, xshape = cache
    n, h, w, c = xshape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=4)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(xshape)


def upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def concat_forward(a, b):
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=3), a.shape[3]


def concat_backward(dout, split):
    return dout[..., :split], dout[..., split:]


def mse_loss(pred, target):
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff, dtype=np.float64) / n), (2.0 / n) * diff
