"""Cross-entropy and focal loss on softmax probabilities."""

from __future__ import annotations

import numpy as np

from .autograd.tensor import Tensor, as_tensor, make

P_MIN = 1e-12


def target_indices(targets, num_classes: int) -> np.ndarray:
    """Accept class indices ``[N]`` or one-hot rows ``[N, C]``."""
    t = np.asarray(targets)
    if t.ndim == 2:
        t = t.argmax(axis=1)
    t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise ValueError(f"target index out of range for {num_classes} classes")
    return t


def _pick(probs: Tensor, targets):
    n, c = probs.shape
    idx = target_indices(targets, c)
    rows = np.arange(n)
    p_raw = probs.data[rows, idx]
    p_t = np.clip(p_raw, P_MIN, 1.0)
    live = p_raw >= P_MIN  # gradient vanishes where the clamp is active
    return rows, idx, p_t, live


def cross_entropy(probs, targets) -> Tensor:
    """Mean of ``-log p_target`` with ``p`` clamped to ``[1e-12, 1]``."""
    probs = as_tensor(probs)
    n = probs.shape[0]
    rows, idx, p_t, live = _pick(probs, targets)
    value = np.mean(-np.log(p_t))

    def back(g):
        gp = np.zeros_like(probs.data)
        gp[rows, idx] = g * live * (-1.0 / (n * p_t))
        return (gp,)

    return make(np.asarray(value, dtype=probs.data.dtype), (probs,), back)


def focal_loss(probs, targets, gamma: float = 2.0) -> Tensor:
    """Mean of ``-(1 - p_t)^gamma * log(p_t)`` (no alpha balancing)."""
    if gamma < 0:
        raise ValueError(f"focal loss gamma must be >= 0, got {gamma}")
    probs = as_tensor(probs)
    n = probs.shape[0]
    rows, idx, p_t, live = _pick(probs, targets)
    q = 1.0 - p_t
    log_p = np.log(p_t)
    mod = q ** gamma
    value = np.mean(-mod * log_p)

    def back(g):
        if gamma == 0:
            dmod = np.zeros_like(q)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                dmod = np.where(q > 0, gamma * q ** (gamma - 1.0) * log_p, 0.0)
        dp = dmod - mod / p_t
        gp = np.zeros_like(probs.data)
        gp[rows, idx] = g * live * dp / n
        return (gp,)

    return make(np.asarray(value, dtype=probs.data.dtype), (probs,), back)


def get_loss(name: str, gamma: float = 2.0):
    """Return ``loss(probs, targets) -> Tensor`` for ``"ce"`` or ``"focal"``."""
    if name == "ce":
        return cross_entropy
    if name == "focal":
        return lambda probs, targets: focal_loss(probs, targets, gamma)
    raise ValueError(f"unknown loss {name!r}; expected 'ce' or 'focal'")
