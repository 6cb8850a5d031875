"""Differentiable layer primitives on NHWC tensors.

Convolutions are cross-correlations with TensorFlow-style "same" padding:
output size ``ceil(in / stride)``, the odd padding cell goes bottom/right.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ShapeError
from .tensor import Tensor, make


def same_padding(size: int, kernel: int, stride: int):
    """Return ``(out, pad_before, pad_after)`` for one spatial axis."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check_rank(x: Tensor, rank: int, op: str):
    if x.ndim != rank:
        raise ShapeError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix ``[N*ho*wo, kh*kw*C]`` of a padded NHWC array."""
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, kh, kw, c), (s0, s1 * sh, s2 * sw, s1, s2, s3), writeable=False)
    return view.reshape(n * ho * wo, kh * kw * c)


def _pad_hw(a: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if top or bottom or left or right:
        return np.pad(a, ((0, 0), (top, bottom), (left, right), (0, 0)))
    return np.ascontiguousarray(a)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor = None, stride=(1, 1)) -> Tensor:
    """``x`` [N,H,W,Cin], ``kernel`` [kh,kw,Cin,Cout] → [N,ceil(H/sh),ceil(W/sw),Cout]."""
    _check_rank(x, 4, "conv2d")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    sh, sw = stride
    ho, pt, pb = same_padding(h, kh, sh)
    wo, pl, pr = same_padding(w, kw, sw)

    xp = _pad_hw(x.data, pt, pb, pl, pr)
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    w2 = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = _col_sum(g2)
        gx = None
        if x.requires_grad:
            if sh == 1 and sw == 1:
                # stride 1: input gradient is a correlation with the flipped kernel
                gp = _pad_hw(g, kh - 1 - pt, kh - 1 - pb, kw - 1 - pl, kw - 1 - pr)
                flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                gx = (_im2col(gp, kh, kw, 1, 1, h, w) @ flipped).reshape(n, h, w, cin)
            else:
                dcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
                dxp = np.zeros(xp.shape, dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += dcols[:, :, :, i, j, :]
                gx = dxp[:, pt:pt + h, pl:pl + w, :]
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make(out, parents, back)


def multi_conv2d(x: Tensor, kernels, biases) -> Tensor:
    """Stride-1 same-padded convolutions sharing one input, concatenated on channels.

    Equivalent to ``concat([conv2d(x, k, b) for k, b in ...])`` but builds a
    single patch matrix over the union of kernel taps, so no per-branch
    im2col or concatenation copy is made.
    """
    _check_rank(x, 4, "multi_conv2d")
    n, h, w, cin = x.shape
    offsets = {}
    layout = []
    for k in kernels:
        kh, kw, kcin, _ = k.shape
        if kcin != cin:
            raise ShapeError(f"multi_conv2d: input has {cin} channels, kernel expects {kcin}")
        pt, pl = (kh - 1) // 2, (kw - 1) // 2
        taps = []
        for i in range(kh):
            for j in range(kw):
                taps.append(offsets.setdefault((i - pt, j - pl), len(offsets)))
        layout.append(taps)
    offs = list(offsets)
    top = -min(o[0] for o in offs)
    left = -min(o[1] for o in offs)
    bottom = max(o[0] for o in offs)
    right = max(o[1] for o in offs)
    xp = _pad_hw(x.data, top, bottom, left, right)
    t = len(offs)
    # tap-major patch matrix [T*Cin, N*H*W]: each tap fills contiguous rows
    cols = np.empty((t, cin, n, h, w), dtype=x.data.dtype)
    for idx, (di, dj) in enumerate(offs):
        cols[idx] = xp[:, top + di:top + di + h, left + dj:left + dj + w, :].transpose(3, 0, 1, 2)
    cols = cols.reshape(t * cin, n * h * w)

    couts = [k.shape[3] for k in kernels]
    bounds = np.concatenate([[0], np.cumsum(couts)])
    wfull = np.zeros((t, cin, bounds[-1]), dtype=x.data.dtype)
    for k, taps, lo, hi in zip(kernels, layout, bounds[:-1], bounds[1:]):
        wfull[taps, :, lo:hi] = k.data.reshape(len(taps), cin, hi - lo)
    wfull = wfull.reshape(t * cin, bounds[-1])
    out = cols.T @ wfull
    out += np.concatenate([b.data for b in biases])
    out = out.reshape(n, h, w, bounds[-1])

    def back(g):
        g2 = g.reshape(-1, bounds[-1])
        gw = (cols @ g2).reshape(t, cin, bounds[-1])
        gs = [gw[taps, :, lo:hi].reshape(k.shape) for k, taps, lo, hi in zip(kernels, layout, bounds[:-1], bounds[1:])]
        gb = np.split(_col_sum(g2), bounds[1:-1])
        gx = None
        if x.requires_grad:
            dcols = (wfull @ g2.T).reshape(t, cin, n, h, w)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for idx, (di, dj) in enumerate(offs):
                dxp[:, top + di:top + di + h, left + dj:left + dj + w, :] += dcols[idx].transpose(1, 2, 3, 0)
            gx = dxp[:, top:top + h, left:left + w, :]
        return (gx, *gs, *gb)

    return make(out, (x, *kernels, *biases), back)


def _col_sum(a2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array via BLAS (much faster than ``sum(axis=0)``)."""
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, moving_mean: np.ndarray, moving_var: np.ndarray,
               training: bool, momentum: float = 0.99, eps: float = 1e-3, relu: bool = False) -> Tensor:
    """Normalize over every axis except the last (channel) axis.

    In training mode batch statistics are used and ``moving_mean`` /
    ``moving_var`` are updated in place (biased batch variance).  With
    ``relu=True`` the result is passed through ReLU in the same node.
    """
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma has shape {gamma.shape}")
    dt = x.data.dtype
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if training:
        mu = _col_sum(x2) / m
        centred = x2 - mu
        var = np.einsum("ij,ij->j", centred, centred) / m
        del centred
        moving_mean *= momentum
        moving_mean += (1.0 - momentum) * mu
        moving_var *= momentum
        moving_var += (1.0 - momentum) * var
    else:
        mu = moving_mean.astype(dt)
        var = moving_var.astype(dt)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    scale = gamma.data * inv_std
    out = x2 * scale
    out += beta.data - mu * scale
    if relu:
        np.maximum(out, 0, out=out)

    def back(g):
        g2 = g.reshape(-1, c)
        if relu:
            g2 = g2 * (out > 0)
        sum_g = _col_sum(g2)
        # sum of g * xhat without materializing xhat
        sum_gx = (np.einsum("ij,ij->j", g2, x2) - mu * sum_g) * inv_std
        gx = None
        if x.requires_grad:
            if training:
                k = scale / m
                gx = g2 * (k * m)
                coef = -k * sum_gx * inv_std
                gx += x2 * coef
                gx -= k * sum_g + coef * mu
            else:
                gx = g2 * scale
            gx = gx.reshape(x.shape)
        return gx, (sum_gx if gamma.requires_grad else None), (sum_g if beta.requires_grad else None)

    return make(out.reshape(x.shape), (x, gamma, beta), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def avg_pool2d(x: Tensor, pool=(2, 2)) -> Tensor:
    """Non-overlapping mean pooling (stride = pool) with ceil-mode edges.

    Edge windows average only the cells that exist in the input.
    """
    _check_rank(x, 4, "avg_pool2d")
    n, h, w, c = x.shape
    ph, pw = pool
    ho, pt, pb = same_padding(h, ph, ph)
    wo, pl, pr = same_padding(w, pw, pw)
    padded = bool(pt or pb or pl or pr)
    xp = _pad_hw(x.data, pt, pb, pl, pr)
    valid_h = np.pad(np.ones(h), (pt, pb)).reshape(ho, ph).sum(axis=1)
    valid_w = np.pad(np.ones(w), (pl, pr)).reshape(wo, pw).sum(axis=1)
    inv_counts = (1.0 / (valid_h[:, None] * valid_w[None, :])).astype(x.data.dtype)[None, :, :, None]
    out = xp.reshape(n, ho, ph, wo, pw, c).sum(axis=(2, 4))
    out *= inv_counts

    def back(g):
        gp = np.empty((n, ho, ph, wo, pw, c), dtype=g.dtype)
        gp[...] = (g * inv_counts)[:, :, None, :, None, :]
        gp = gp.reshape(n, ho * ph, wo * pw, c)
        return (gp[:, pt:pt + h, pl:pl + w, :] if padded else gp,)

    return make(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,H,W,C] → [N,C] per-channel spatial mean."""
    _check_rank(x, 4, "global_avg_pool")
    n, h, w, c = x.shape
    scale = 1.0 / (h * w)

    def back(g):
        return (np.broadcast_to((g * scale)[:, None, None, :], (n, h, w, c)).copy(),)

    return make(x.data.mean(axis=(1, 2)), (x,), back)


def dense(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` [N, in] and ``weight`` [in, out]."""
    _check_rank(x, 2, "dense")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; exact identity when not training or ``rate == 0``."""
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return make(x.data * keep, (x,), lambda g: (g * keep,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make(p, (x,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)
