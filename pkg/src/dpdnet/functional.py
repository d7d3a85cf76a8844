"""Differentiable NHWC layer primitives.

Convolutions use "same" zero padding (output extent ``ceil(n / stride)``) and
are lowered to a single matrix product over an im2col buffer. Kernel layouts:

* ``conv2d``: ``(kh, kw, in, out)``
* ``depthwise_conv2d``: ``(kh, kw, channels)``
* ``conv2d_transpose``: ``(kh, kw, out, in)``, i.e. the layout of the conv2d
  it is the adjoint of.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensor import Tensor, make_node


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def same_padding(n: int, k: int, s: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for a same-padded conv along one axis."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    n, _, _, c = padded_shape
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += cols[:, :, :, i, j, :]
    return out


class _ConvGeometry:
    """Padding and output extents of a same-padded conv on an ``(h, w)`` input."""

    def __init__(self, in_hw, kernel, stride):
        self.h, self.w = in_hw
        self.kh, self.kw = kernel
        self.sh, self.sw = stride
        self.ho, self.pt, self.pb = same_padding(self.h, self.kh, self.sh)
        self.wo, self.pl, self.pr = same_padding(self.w, self.kw, self.sw)

    def pad(self, x: np.ndarray) -> np.ndarray:
        if self.pt == self.pb == self.pl == self.pr == 0:
            return x
        return np.pad(x, ((0, 0), (self.pt, self.pb), (self.pl, self.pr), (0, 0)))

    def unpad(self, xp: np.ndarray) -> np.ndarray:
        return xp[:, self.pt:self.pt + self.h, self.pl:self.pl + self.w, :]

    def padded_shape(self, n: int, c: int):
        return (n, self.h + self.pt + self.pb, self.w + self.pl + self.pr, c)

    def cols(self, x: np.ndarray) -> np.ndarray:
        if self.kh == self.kw == 1:
            n, _, _, c = x.shape
            return np.ascontiguousarray(x[:, ::self.sh, ::self.sw, :]).reshape(n * self.ho * self.wo, c)
        return _im2col(self.pad(x), self.kh, self.kw, self.sh, self.sw, self.ho, self.wo)

    def fold(self, cols: np.ndarray, n: int, c: int) -> np.ndarray:
        if self.kh == self.kw == 1:
            if self.sh == self.sw == 1:
                return cols.reshape(n, self.h, self.w, c)
            out = np.zeros((n, self.h, self.w, c), dtype=cols.dtype)
            out[:, ::self.sh, ::self.sw, :] = cols.reshape(n, self.ho, self.wo, c)
            return out
        xp = _col2im(cols, self.padded_shape(n, c), self.kh, self.kw, self.sh, self.sw, self.ho, self.wo)
        return self.unpad(xp)


def _check_input(x: Tensor, channels: int, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects (batch, height, width, channels), got {x.shape}")
    if x.shape[-1] != channels:
        raise ValueError(f"{op}: input has {x.shape[-1]} channels, kernel expects {channels}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1) -> Tensor:
    kh, kw, cin, cout = weight.shape
    _check_input(x, cin, "conv2d")
    geo = _ConvGeometry(x.shape[1:3], (kh, kw), _pair(stride))
    if geo.ho < 1 or geo.wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}")
    n = x.shape[0]
    cols = geo.cols(x.data)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, geo.ho, geo.wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gx = geo.fold(g2 @ w2.T, n, cin) if x.requires_grad else None
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, grad_fn, "conv2d")


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1) -> Tensor:
    """Fractionally strided convolution producing ``in * stride`` spatial extents.

    Computes exactly the input-gradient of ``conv2d(., weight, stride)`` for a
    conv whose input had extents ``in * stride``.
    """
    kh, kw, cout, cin = weight.shape
    _check_input(x, cin, "conv2d_transpose")
    sh, sw = _pair(stride)
    n, h, w, _ = x.shape
    geo = _ConvGeometry((h * sh, w * sw), (kh, kw), (sh, sw))
    if (geo.ho, geo.wo) != (h, w):
        raise ValueError(f"conv2d_transpose cannot realize {h * sh}x{w * sw} from {h}x{w}")
    w2 = weight.data.reshape(kh * kw * cout, cin)
    out = geo.fold(x.data.reshape(-1, cin) @ w2.T, n, cout)
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    x2 = x.data.reshape(-1, cin)

    def grad_fn(g):
        gcols = geo.cols(g)
        gx = (gcols @ w2).reshape(x.shape) if x.requires_grad else None
        gw = (gcols.T @ x2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    return make_node(out, parents, grad_fn, "conv2d_transpose")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride=1) -> Tensor:
    kh, kw, c = weight.shape
    _check_input(x, c, "depthwise_conv2d")
    geo = _ConvGeometry(x.shape[1:3], (kh, kw), _pair(stride))
    sh, sw, ho, wo = geo.sh, geo.sw, geo.ho, geo.wo
    xp = geo.pad(x.data)
    wd = weight.data
    out = np.zeros((x.shape[0], ho, wo, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] * wd[i, j]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(kh):
            for j in range(kw):
                window = (slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
                gw[i, j] = (xp[window] * g).sum(axis=(0, 1, 2))
                gxp[window] += g * wd[i, j]
        return geo.unpad(gxp), gw

    return make_node(out, (x, weight), grad_fn, "depthwise_conv2d")


def separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor, bias: Tensor | None = None,
                     stride=1) -> Tensor:
    """Per-channel k x k convolution followed by a 1 x 1 mixing convolution."""
    mid = depthwise_conv2d(x, depthwise, stride)
    return conv2d(mid, pointwise, bias, 1)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize with batch statistics over (batch, height, width).

    Returns the output tensor plus the biased batch mean and variance.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if x.shape[0] == 0:
        raise ValueError("batch_norm on an empty batch")
    xd = x.data
    m = xd.size // c
    mean = xd.mean(axis=(0, 1, 2))
    centered = xd - mean
    var = (centered * centered).mean(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gbeta = g.sum(axis=(0, 1, 2))
        ggamma = (g * xhat).sum(axis=(0, 1, 2))
        gxhat = g * gamma.data
        gx = (inv_std / m) * (m * gxhat - gxhat.sum(axis=(0, 1, 2)) - xhat * (gxhat * xhat).sum(axis=(0, 1, 2)))
        return gx, ggamma, gbeta

    return make_node(out.astype(xd.dtype, copy=False), (x, gamma, beta), grad_fn, "batch_norm"), mean, var


def batch_norm_infer(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
                     eps: float) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or mean.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels but statistics of shape {mean.shape}")
    scale = gamma.data / np.sqrt(var + eps)
    xhat = (x.data - mean) / np.sqrt(var + eps)
    out = (x.data - mean) * scale + beta.data

    def grad_fn(g):
        return g * scale, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn, "batch_norm")


def max_pool2d(x: Tensor, size) -> Tensor:
    """Non-overlapping max pooling (stride = size); trailing rows/cols are dropped."""
    ph, pw = _pair(size)
    if ph < 1 or pw < 1:
        raise ValueError(f"pool size must be positive, got {(ph, pw)}")
    n, h, w, c = x.shape
    ho, wo = h // ph, w // pw
    if ho == 0 or wo == 0:
        raise ValueError(f"max_pool2d of {h}x{w} with size {(ph, pw)} is empty")
    blocks = x.data[:, :ho * ph, :wo * pw, :].reshape(n, ho, ph, wo, pw, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, ph * pw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros((n, ho, wo, c, ph * pw), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, ho, wo, c, ph, pw).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * ph, wo * pw, c)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :ho * ph, :wo * pw, :] = gb
        return (gx,)

    return make_node(out, (x,), grad_fn, "max_pool2d")


def upsample_nearest(x: Tensor, size) -> Tensor:
    fh, fw = _pair(size)
    if fh < 1 or fw < 1:
        raise ValueError(f"upsample size must be positive, got {(fh, fw)}")
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, fh, w, fw, c)).reshape(n, h * fh, w * fw, c)

    def grad_fn(g):
        return (g.reshape(n, h, fh, w, fw, c).sum(axis=(2, 4)),)

    return make_node(out, (x,), grad_fn, "upsample_nearest")


def _amounts(amounts) -> tuple[tuple[int, int], tuple[int, int]]:
    if isinstance(amounts, (int, np.integer)):
        return (int(amounts),) * 2, (int(amounts),) * 2
    rows, cols = amounts
    rows = (int(rows), int(rows)) if isinstance(rows, (int, np.integer)) else tuple(map(int, rows))
    cols = (int(cols), int(cols)) if isinstance(cols, (int, np.integer)) else tuple(map(int, cols))
    return rows, cols


def crop2d(x: Tensor, amounts) -> Tensor:
    """Remove ``((top, bottom), (left, right))`` rows/cols; ints mean symmetric."""
    (t, b), (l, r) = _amounts(amounts)
    n, h, w, c = x.shape
    if min(t, b, l, r) < 0 or t + b >= h or l + r >= w:
        raise ValueError(f"cannot crop {((t, b), (l, r))} from {h}x{w}")
    out = x.data[:, t:h - b, l:w - r, :]

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, t:h - b, l:w - r, :] = g
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), grad_fn, "crop2d")


def zero_pad2d(x: Tensor, amounts) -> Tensor:
    """Add zero rows/cols; ``(1, 2)`` pads 1 row top and bottom, 2 cols left and right."""
    (t, b), (l, r) = _amounts(amounts)
    if min(t, b, l, r) < 0:
        raise ValueError(f"negative padding {((t, b), (l, r))}")
    h, w = x.shape[1:3]
    out = np.pad(x.data, ((0, 0), (t, b), (l, r), (0, 0)))
    return make_node(out, (x,), lambda g: (g[:, t:t + h, l:l + w, :],), "zero_pad2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    info = np.finfo(x.dtype)
    # keep the output strictly inside (0, 1) even where float rounding saturates
    y = np.clip(expit(x.data), info.tiny, 1.0 - info.epsneg)
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return make_node(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")
