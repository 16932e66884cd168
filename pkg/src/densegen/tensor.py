"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it supports exactly the operations the
encoder and the action heads need. Values live in row-major (C order)
float64 numpy arrays. Every operation whose inputs participate in
gradient computation records its parents and a backward closure;
``backward()`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into each ``requires_grad``
leaf. Slices copy; there are no strided views escaping an op.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop.

    Leaves are created directly (``Tensor(data, requires_grad=True)`` for
    trainable parameters); interior nodes are created by the ops below.
    A node that feeds several consumers receives the sum of all path
    gradients. Gradients accumulate across calls until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- graph machinery ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        The receiver must be scalar (one element). Uses an iterative
        topological sort so deep rollout graphs cannot hit the Python
        recursion limit.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emit = stack.pop()
            if emit:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _result(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._backward_fn = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _result(-self.data, (self,))
        if out.requires_grad:
            out._backward_fn = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _result(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._backward_fn = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _result(np.ascontiguousarray(self.data.reshape(shape)), (self,))
        if out.requires_grad:
            src_shape = self.data.shape
            out._backward_fn = lambda g: self._accumulate(g.reshape(src_shape))
        return out

    def transpose(self, axes):
        axes = tuple(axes)
        out = _result(np.ascontiguousarray(self.data.transpose(axes)), (self,))
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            out._backward_fn = lambda g: self._accumulate(
                np.ascontiguousarray(g.transpose(inverse))
            )
        return out

    def __getitem__(self, key):
        """Basic indexing (ints and slices) with copy semantics."""
        out = _result(np.array(self.data[key], dtype=np.float64), (self,))
        if out.requires_grad:
            def backward(g):
                full = np.zeros_like(self.data)
                full[key] += g
                self._accumulate(full)
            out._backward_fn = backward
        return out

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def backward(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            out._backward_fn = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        out = _result(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def backward(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g / n, self.data.shape).copy())
            out._backward_fn = backward
        return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple) -> Tensor:
    """Build an op output; parents are dropped when no gradient can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient contributions over broadcast dimensions."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward gives dA = dC.B^T and dB = A^T.dC.

    Supports plain 2-D products, batched stacks with identical leading
    dimensions, and a batched left operand against a 2-D right operand
    (the linear-layer case).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} vs {b.shape}")
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k = a.data.shape[-1]
                    n = g.shape[-1]
                    b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
                else:
                    b._accumulate(np.swapaxes(a.data, -1, -2) @ g)
        out._backward_fn = backward
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        def backward(g):
            start = 0
            index = [slice(None)] * g.ndim
            for t, size in zip(tensors, sizes):
                index[axis] = slice(start, start + size)
                if t.requires_grad:
                    t._accumulate(np.ascontiguousarray(g[tuple(index)]))
                start += size
        out._backward_fn = backward
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (x,))
    if out.requires_grad:
        def backward(g):
            inner = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - inner))
        out._backward_fn = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(k*(x + c*x^3)))."""
    x = _as_tensor(x)
    v = x.data
    t = np.tanh(_GELU_K * (v + _GELU_C * v ** 3))
    out = _result(0.5 * v * (1.0 + t), (x,))
    if out.requires_grad:
        def backward(g):
            local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_K * (
                1.0 + 3.0 * _GELU_C * v * v
            )
            x._accumulate(g * local)
        out._backward_fn = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _result(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def backward(g):
            lead = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=lead))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=lead))
            if x.requires_grad:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True)
                term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * term)
        out._backward_fn = backward
    return out
