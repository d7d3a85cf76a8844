"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor

_MAX_STEP = np.iinfo(np.int64).max


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Apply one Adam step in place to ``params`` and advance ``state``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(
            f"length mismatch: {len(params)} params, {len(grads)} grads, {len(state.m)} moments"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ValueError(f"shape mismatch for {p.name or 'parameter'}: {p.shape}, {np.shape(g)}, {m.shape}")
    if state.t >= _MAX_STEP:
        raise OverflowError("Adam step counter overflow")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=m.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    return state


class Adam:
    """Stateful wrapper over :func:`adam_update` reading ``param.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_update(self.params, grads, self.state)
