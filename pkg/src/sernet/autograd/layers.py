"""Parameterised layers over :mod:`.functional`, with shape and cost accounting.

Shapes passed to ``output_shape``/``profile`` exclude the batch axis:
``(H, W, C)`` for feature maps, ``(F,)`` for vectors.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import functional as F
from .tensor import Tensor


@dataclasses.dataclass
class LayerProfile:
    name: str
    kind: str
    input_elems: int
    output_elems: int
    n_params: int
    flops: int


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws restricted to ±2 std (rejection resampling)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


# std of a unit normal truncated to [-2, 2]
_TRUNC_STD = 0.8796256610342398


def he_truncated_normal(rng, shape, fan_in: int) -> np.ndarray:
    """Truncated normal whose variance is exactly ``2 / fan_in``."""
    return truncated_normal(rng, shape, math.sqrt(2.0 / fan_in) / _TRUNC_STD)


class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name or self.kind

    def __call__(self, x, training: bool = False):
        return self.forward(x, training)

    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def parameters(self) -> list:
        """Trainable tensors."""
        return []

    def buffers(self) -> list:
        """Non-trainable state that must still be checkpointed."""
        return []

    def named_tensors(self, prefix: str = ""):
        for t in self.parameters() + self.buffers():
            yield prefix + self.name + "." + t.name, t

    def output_shape(self, shape):
        return shape

    def flops(self, shape) -> int:
        return 0

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def n_buffers(self) -> int:
        return sum(b.size for b in self.buffers())

    def profile(self, shape, prefix: str = ""):
        """Return ``(output_shape, [LayerProfile, ...])`` for one sample."""
        out = self.output_shape(shape)
        rec = LayerProfile(prefix + self.name, self.kind, math.prod(shape), math.prod(out),
                           self.n_params() + self.n_buffers(), self.flops(shape))
        return out, [rec]


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, kernel_size, c_in: int, c_out: int, stride=(1, 1), *, rng=None,
                 l2: bool = False, dtype=np.float32, name: str = ""):
        super().__init__(name)
        kh, kw = kernel_size
        self.kernel_size = (kh, kw)
        self.stride = tuple(stride)
        self.c_in, self.c_out = c_in, c_out
        rng = rng if rng is not None else np.random.default_rng(0)
        w = he_truncated_normal(rng, (kh, kw, c_in, c_out), kh * kw * c_in)
        self.kernel = Tensor(w.astype(dtype), requires_grad=True, name="kernel")
        self.kernel.l2 = l2
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name="bias")

    def forward(self, x, training=False):
        return F.conv2d(x, self.kernel, self.bias, self.stride)

    def parameters(self):
        return [self.kernel, self.bias]

    def output_shape(self, shape):
        h, w, _ = shape
        return (math.ceil(h / self.stride[0]), math.ceil(w / self.stride[1]), self.c_out)

    def flops(self, shape):
        ho, wo, _ = self.output_shape(shape)
        kh, kw = self.kernel_size
        return 2 * kh * kw * self.c_in * self.c_out * ho * wo


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3, *, dtype=np.float32, name=""):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name="beta")
        self.moving_mean = Tensor(np.zeros(channels, dtype=dtype), name="moving_mean")
        self.moving_var = Tensor(np.ones(channels, dtype=dtype), name="moving_var")

    def forward(self, x, training=False, relu: bool = False):
        return F.batch_norm(x, self.gamma, self.beta, self.moving_mean.data, self.moving_var.data,
                            training, self.momentum, self.eps, relu=relu)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.moving_mean, self.moving_var]

    def flops(self, shape):
        return math.prod(shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        return F.relu(x)

    def flops(self, shape):
        return math.prod(shape)


class AvgPool2D(Layer):
    kind = "avgpool"

    def __init__(self, pool=(2, 2), name=""):
        super().__init__(name)
        self.pool = tuple(pool)

    def forward(self, x, training=False):
        return F.avg_pool2d(x, self.pool)

    def output_shape(self, shape):
        h, w, c = shape
        return (math.ceil(h / self.pool[0]), math.ceil(w / self.pool[1]), c)

    def flops(self, shape):
        return math.prod(shape)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, training=False):
        return F.global_avg_pool(x)

    def output_shape(self, shape):
        return (shape[-1],)

    def flops(self, shape):
        return math.prod(shape)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float, name=""):
        super().__init__(name)
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def forward(self, x, training=False):
        return F.dropout(x, self.rate, self.rng, training)


class Dense(Layer):
    kind = "dense"

    def __init__(self, d_in: int, d_out: int, *, rng=None, zero_init: bool = False, l2: bool = False,
                 dtype=np.float32, name=""):
        super().__init__(name)
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = he_truncated_normal(rng if rng is not None else np.random.default_rng(0), (d_in, d_out), d_in)
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name="kernel")
        self.weight.l2 = l2
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name="bias")

    def forward(self, x, training=False):
        return F.dense(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        return (self.d_out,)

    def flops(self, shape):
        return 2 * self.d_in * self.d_out


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False):
        return F.softmax(x)

    def flops(self, shape):
        return math.prod(shape)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers, name=""):
        super().__init__(name)
        self.layers = list(layers)

    def forward(self, x, training=False):
        layers = self.layers
        i = 0
        while i < len(layers):
            fuse = isinstance(layers[i], BatchNorm) and i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
            if fuse:
                x = layers[i].forward(x, training, relu=True)
                i += 2
            else:
                x = layers[i](x, training)
                i += 1
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def named_tensors(self, prefix=""):
        for layer in self.layers:
            yield from layer.named_tensors(prefix + self.name + ".")

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def flops(self, shape):
        total = 0
        for layer in self.layers:
            total += layer.flops(shape)
            shape = layer.output_shape(shape)
        return total

    def profile(self, shape, prefix=""):
        records = []
        for layer in self.layers:
            shape, recs = layer.profile(shape, prefix + self.name + ".")
            records.extend(recs)
        return shape, records


class ParallelConcat(Layer):
    """Run branches on the same input and concatenate on the channel axis."""

    kind = "concat"

    def __init__(self, branches, name="", fused: bool = True):
        super().__init__(name)
        self.branches = list(branches)
        self.fused = fused

    def _fusable(self) -> bool:
        """True when every branch is a stride-1 ``conv -> BN -> ReLU`` chain."""
        bns = []
        for b in self.branches:
            layers = getattr(b, "layers", None)
            if not layers or len(layers) != 3:
                return False
            conv, bn, act = layers
            if not (isinstance(conv, Conv2D) and isinstance(bn, BatchNorm) and isinstance(act, ReLU)):
                return False
            if conv.stride != (1, 1):
                return False
            bns.append((bn.momentum, bn.eps))
        return len(set(bns)) == 1

    def forward(self, x, training=False):
        if self.fused and self._fusable():
            return self._forward_fused(x, training)
        return F.concat([b(x, training) for b in self.branches], axis=-1)

    def _forward_fused(self, x, training):
        convs = [b.layers[0] for b in self.branches]
        bns = [b.layers[1] for b in self.branches]
        y = F.multi_conv2d(x, [c.kernel for c in convs], [c.bias for c in convs])
        gamma = F.concat([bn.gamma for bn in bns], axis=0)
        beta = F.concat([bn.beta for bn in bns], axis=0)
        mean = np.concatenate([bn.moving_mean.data for bn in bns])
        var = np.concatenate([bn.moving_var.data for bn in bns])
        y = F.batch_norm(y, gamma, beta, mean, var, training, bns[0].momentum, bns[0].eps, relu=True)
        if training:
            lo = 0
            for bn in bns:
                hi = lo + bn.gamma.size
                bn.moving_mean.data[...] = mean[lo:hi]
                bn.moving_var.data[...] = var[lo:hi]
                lo = hi
        return y

    def parameters(self):
        return [p for b in self.branches for p in b.parameters()]

    def buffers(self):
        return [t for b in self.branches for t in b.buffers()]

    def named_tensors(self, prefix=""):
        for b in self.branches:
            yield from b.named_tensors(prefix + self.name + ".")

    def output_shape(self, shape):
        outs = [b.output_shape(shape) for b in self.branches]
        return outs[0][:-1] + (sum(o[-1] for o in outs),)

    def flops(self, shape):
        return sum(b.flops(shape) for b in self.branches)

    def profile(self, shape, prefix=""):
        records = []
        outs = []
        for b in self.branches:
            out, recs = b.profile(shape, prefix + self.name + ".")
            outs.append(out)
            records.extend(recs)
        out = self.output_shape(shape)
        records.append(LayerProfile(prefix + self.name, self.kind, sum(math.prod(o) for o in outs),
                                    math.prod(out), 0, 0))
        return out, records
