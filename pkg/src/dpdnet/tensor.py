"""Dense NHWC tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op builds a node
that remembers its parents and a closure mapping the output gradient to the
parent gradients; :func:`backward` walks those nodes once, in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DETERMINISTIC = False
_THREAD_LIMITER = None


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class TapeError(RuntimeError):
    """backward() was called on something that is not a recorded scalar."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating point type (e.g. ``"float64"``)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_deterministic(flag: bool) -> None:
    """Serialize BLAS reductions so repeated runs are bitwise reproducible."""
    global _DETERMINISTIC, _THREAD_LIMITER
    flag = bool(flag)
    if flag == _DETERMINISTIC:
        return
    if flag:
        _THREAD_LIMITER = threadpool_limits(limits=1)
    elif _THREAD_LIMITER is not None:
        _THREAD_LIMITER.restore_original_limits()
        _THREAD_LIMITER = None
    _DETERMINISTIC = flag


def is_deterministic() -> bool:
    return _DETERMINISTIC


class Tensor:
    """n-dimensional real array that can take part in gradient recording."""

    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} created with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"only single-element tensors convert to float, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("mul", elementwise("sub", self, other), -1.0)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return elementwise("mul", reduce_sum(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str = "") -> Tensor:
    """Wrap an op result; record it on the tape when any parent needs gradients."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op or 'op'} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = op
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


# ---------------------------------------------------------------------------
# elementwise math
# ---------------------------------------------------------------------------

_ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "max", "min")


def elementwise(kind: str, a, b) -> Tensor:
    """Apply ``kind`` to equal-shaped tensors, or a tensor and a python scalar."""
    if kind not in _ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise op {kind!r}")
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ValueError(f"shape mismatch in {kind}: {a.shape} vs {b.shape}")
        bd = b.data
        parents = (a, b)
    else:
        bd = float(b)
        parents = (a,)
    ad = a.data
    if kind == "add":
        out = ad + bd
    elif kind == "sub":
        out = ad - bd
    elif kind == "mul":
        out = ad * bd
    elif kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):  # reported by make_node
            out = ad / bd
    elif kind == "max":
        out = np.maximum(ad, bd)
    else:
        out = np.minimum(ad, bd)
    out = out.astype(ad.dtype, copy=False)

    def grad_fn(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * bd, g * ad
        elif kind == "div":
            ga, gb = g / bd, -g * ad / (bd * bd)
        else:
            pick = (ad >= bd) if kind == "max" else (ad <= bd)
            ga, gb = g * pick, g * ~pick
        return (ga, gb) if len(parents) == 2 else (ga,)

    return make_node(out, parents, grad_fn, kind)


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return make_node(np.asarray(a.data.sum(dtype=a.dtype)), (a,), grad_fn, "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the leading batch axis of per-sample squared L2 distances."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0] if a.ndim else 1
    diff = a.data - b.data
    value = np.asarray((diff * diff).sum(dtype=np.float64) / n, dtype=a.dtype)
    parents = tuple(t for t in (a, b) if t.requires_grad) or (a,)

    def grad_fn(g):
        ga = (2.0 / n) * g * diff
        grads = []
        for t in parents:
            grads.append(ga if t is a else -ga)
        return grads

    return make_node(value, parents, grad_fn, "mse")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    When ``params`` is given, also return the gradients of this ``loss`` alone
    (not anything accumulated earlier) in order; parameters the loss does not
    depend on get zeros.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise TapeError(f"backward needs a scalar tensor, got {getattr(loss, 'shape', type(loss))}")
    params = None if params is None else list(params)
    if not loss.requires_grad:
        if params is None:
            raise TapeError("loss was not recorded on a gradient tape (no input requires grad)")
        return [np.zeros_like(p.data) for p in params]
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaf_grads[id(node)] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return None
    return [leaf_grads[id(p)].copy() if id(p) in leaf_grads else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(
    graph,
    input_shape: Sequence[int] | None,
    eps: float = 1e-6,
    seed: int = 0,
    params: Sequence[Tensor] | None = None,
    wrt_input: bool = True,
) -> float:
    """Compare analytic and central-difference gradients of ``graph``.

    ``graph`` maps an input tensor to an output tensor (a Module or any
    callable). The scalar checked is ``sum(graph(x) * R)`` for a fixed random
    projection ``R``. Gradients are taken with respect to ``params`` (default:
    ``graph.parameters()`` when available) and, if ``wrt_input``, the input.
    Runs in float64. Returns ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over all checked tensors together; 0.0 when there is nothing to
    differentiate.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = list(graph.parameters()) if hasattr(graph, "parameters") else []
    params = list(params)
    with precision("float64"):
        saved = [p.data for p in params]
        for p in params:
            p.data = p.data.astype(np.float64)
        try:
            x = None
            if input_shape is not None:
                x = Tensor(rng.standard_normal(tuple(input_shape)), requires_grad=wrt_input)
            targets = params + ([x] if (wrt_input and x is not None) else [])
            if not targets:
                return 0.0

            def call():
                return graph(x) if x is not None else graph()

            probe = call()
            proj = Tensor(rng.standard_normal(probe.shape))

            def objective() -> Tensor:
                return reduce_sum(elementwise("mul", call(), proj))

            for t in targets:
                t.grad = None
            loss = objective()
            backward(loss)
            analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in targets]

            numerics = []
            with no_grad():
                for t in targets:
                    numeric = np.zeros_like(t.data)
                    flat = t.data.reshape(-1)
                    nflat = numeric.reshape(-1)
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + eps
                        plus = objective().item()
                        flat[i] = orig - eps
                        minus = objective().item()
                        flat[i] = orig
                        nflat[i] = (plus - minus) / (2.0 * eps)
                    numerics.append(numeric)
            # one shared scale: tensors whose true gradient is zero (a bias
            # feeding batch norm) would otherwise compare noise with noise
            return _max_relative_error(np.concatenate([a.ravel() for a in analytic]),
                                       np.concatenate([n.ravel() for n in numerics]))
        finally:
            for p, d in zip(params, saved):
                p.data = d
                p.grad = None
