"""Adam with bias correction, the step learning-rate schedule, fp16 casting."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .tensor import Tensor

FP16_MAX = 65504.0


@dataclasses.dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam update.

    Parameters whose ``l2`` flag is set additionally shrink by
    ``lr * weight_decay * w`` (evaluated at the pre-update weight).
    ``None`` gradients count as zero.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        if weight_decay and p.l2:
            update = update + (lr * weight_decay) * p.data
        p.data -= update.astype(p.data.dtype, copy=False)


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 0.0, **adam_kw):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState.for_params(self.params, **adam_kw)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float = None):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.weight_decay)


def lr_schedule(epoch: int, base_lr: float = 1e-4, start: int = 50, every: int = 20, rate: float = 0.15) -> float:
    """Constant ``base_lr`` before ``start``; times ``e^-rate`` at start, start+every, ..."""
    if epoch < start:
        return base_lr
    steps = 1 + (epoch - start) // every
    return base_lr * math.exp(-rate * steps)


def cast_fp16(t) -> Tensor:
    """IEEE binary16 storage copy (round-to-nearest-even, saturating at ±65504)."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    clipped = np.clip(data, -FP16_MAX, FP16_MAX)
    return Tensor(clipped.astype(np.float16))
