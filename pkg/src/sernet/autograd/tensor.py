"""Dense tensor with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure; :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates gradients into
leaf tensors. Intermediate gradients are not retained.
"""

from __future__ import annotations

import numpy as np

_DTYPE_TAGS = {np.dtype(np.float64): "fp64", np.dtype(np.float32): "fp32", np.dtype(np.float16): "fp16"}


class Tensor:
    def __init__(self, data, requires_grad: bool = False, *, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        # params of layers receiving L2 weight decay in the optimizer
        self.l2 = False
        self._parents = ()
        self._backward = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self) -> str:
        return _DTYPE_TAGS[self.data.dtype]

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd ------------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic (used by losses and gradient checks) ---------

    def __add__(self, other):
        other = as_tensor(other, self.data.dtype)
        return make(self.data + other.data, (self, other),
                    lambda g: (unbroadcast(g, self.shape), unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.data.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return make(a * b, (self, other),
                    lambda g: (unbroadcast(g * b, self.shape), unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def sum(self, axis=None):
        shape = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return make(self.data.sum(axis=axis), (self,), back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make(data, parents, backward) -> Tensor:
    """Build an op output; record ``backward`` only if some parent needs grad.

    ``backward(g)`` returns one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g
