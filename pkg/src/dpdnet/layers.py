"""Parameterized layers and a minimal module container.

Modules own named parameters (trainable :class:`Tensor` leaves) and buffers
(non-trainable arrays such as batch-norm running statistics). Naming follows
attribute paths, e.g. ``main.enc1.branch.0.weight``.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype

_TRACE: list | None = None


@contextlib.contextmanager
def trace_shapes() -> Iterator[list]:
    """Record ``(path, output shape)`` for every named child a Sequential runs."""
    global _TRACE
    previous = _TRACE
    _TRACE = []
    try:
        yield _TRACE
    finally:
        _TRACE = previous


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


class Module:
    """Base class: parameter/buffer discovery, train/eval mode, state dicts."""

    training = True

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, *args):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(params) + list(buffers) if k not in state]
        unexpected = [k for k in state if k not in params and k not in buffers]
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            owner, attr = self._resolve(name)
            value = np.asarray(state[name])
            if value.shape != buf.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {buf.shape}")
            setattr(owner, attr, value.astype(buf.dtype, copy=True))

    def _resolve(self, dotted: str):
        owner = self
        *path, attr = dotted.split(".")
        for key in path:
            owner = getattr(owner, key)
        return owner, attr

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Sequential(Module):
    def __init__(self, *layers, **named_layers):
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        for name, layer in named_layers.items():
            setattr(self, name, layer)

    def __iter__(self):
        return (m for _, m in self._children())

    def forward(self, x):
        for name, layer in self._children():
            x = layer(x)
            if _TRACE is not None and not isinstance(layer, Sequential):
                label = getattr(self, "label", None)
                _TRACE.append((f"{label}.{name}" if label else name, x.shape))
        return x


class Conv2D(Module):
    def __init__(self, in_channels: int, filters: int, kernel=(3, 3), stride=(1, 1), rng=None):
        rng = rng or np.random.default_rng()
        kh, kw = F._pair(kernel)
        self.stride = F._pair(stride)
        self.weight = _he_uniform(rng, (kh, kw, in_channels, filters), kh * kw * in_channels)
        self.bias = _zeros(filters)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride)


class SeparableConv2D(Module):
    def __init__(self, in_channels: int, filters: int, kernel=(3, 3), stride=(1, 1), rng=None):
        rng = rng or np.random.default_rng()
        kh, kw = F._pair(kernel)
        self.stride = F._pair(stride)
        self.depthwise = _he_uniform(rng, (kh, kw, in_channels), kh * kw)
        self.pointwise = _he_uniform(rng, (1, 1, in_channels, filters), in_channels)
        self.bias = _zeros(filters)

    def forward(self, x):
        return F.separable_conv2d(x, self.depthwise, self.pointwise, self.bias, self.stride)


class Conv2DTranspose(Module):
    def __init__(self, in_channels: int, filters: int, kernel=(3, 3), stride=(2, 2), rng=None):
        rng = rng or np.random.default_rng()
        kh, kw = F._pair(kernel)
        self.stride = F._pair(stride)
        self.weight = _he_uniform(rng, (kh, kw, filters, in_channels), kh * kw * in_channels)
        self.bias = _zeros(filters)

    def forward(self, x):
        return F.conv2d_transpose(x, self.weight, self.bias, self.stride)


class BatchNorm(Module):
    """Per-channel batch normalization.

    Running statistics are an exponential moving average with bias
    correction: after ``t`` updates they equal the normalized weighted mean
    of the batch statistics seen so far, so they are usable from the first
    update rather than being dragged toward their initial values.
    """

    _buffers = ("running_mean", "running_var", "num_batches")

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3):
        dtype = get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = _zeros(channels)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches = np.zeros(1, dtype=dtype)

    def forward(self, x):
        if not self.training:
            return F.batch_norm_infer(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        out, mean, var = F.batch_norm_train(x, self.gamma, self.beta, self.eps)
        t = float(self.num_batches[0]) + 1.0
        m = self.momentum
        # debiased EMA: keep = m (1 - m^(t-1)) / (1 - m^t); zero on the first update
        keep = m * (1.0 - m ** (t - 1)) / (1.0 - m ** t)
        dtype = self.running_mean.dtype
        self.running_mean = (keep * self.running_mean + (1.0 - keep) * mean).astype(dtype)
        self.running_var = (keep * self.running_var + (1.0 - keep) * var).astype(dtype)
        self.num_batches = np.array([t], dtype=dtype)
        return out


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Sigmoid(Module):
    def forward(self, x):
        return F.sigmoid(x)


class MaxPool2D(Module):
    def __init__(self, size=(3, 3)):
        self.size = F._pair(size)

    def forward(self, x):
        return F.max_pool2d(x, self.size)


class UpSampling2D(Module):
    def __init__(self, size=(2, 2)):
        self.size = F._pair(size)

    def forward(self, x):
        return F.upsample_nearest(x, self.size)


class Cropping2D(Module):
    def __init__(self, cropping):
        self.cropping = F._amounts(cropping)

    def forward(self, x):
        return F.crop2d(x, self.cropping)


class ZeroPadding2D(Module):
    def __init__(self, padding):
        self.padding = F._amounts(padding)

    def forward(self, x):
        return F.zero_pad2d(x, self.padding)


class Concatenate(Module):
    def forward(self, *xs):
        return F.concat(xs, axis=-1)
