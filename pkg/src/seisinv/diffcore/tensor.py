"""Tape-recorded tensors with reverse-mode gradients.

Every operation builds a new Tensor holding a backward closure and its
parent tensors. backward() walks the tape in reverse topological order
(iteratively; graphs here get thousands of nodes deep) and accumulates
gradients into leaves with requires_grad set. Intermediate gradients
are dropped as soon as their node has propagated, which keeps peak
memory near the activation footprint.
"""

import contextlib

import numpy as np

_grad_enabled = True


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # ---- plumbing -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
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
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                node.grad = None   # free non-leaf gradient storage

    # ---- elementwise arithmetic ------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out_req = _grad_enabled and (self.requires_grad or other.requires_grad)
        out = Tensor(self.data + other.data, out_req,
                     (self, other) if out_req else ())

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = backward if out_req else None
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        out_req = _grad_enabled and (self.requires_grad or other.requires_grad)
        out = Tensor(self.data * other.data, out_req,
                     (self, other) if out_req else ())

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = backward if out_req else None
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __truediv__(self, other):
        other = self._coerce(other)
        out_req = _grad_enabled and (self.requires_grad or other.requires_grad)
        out = Tensor(self.data / other.data, out_req,
                     (self, other) if out_req else ())

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(
                    -g * self.data / other.data ** 2, other.data.shape))
        out._backward = backward if out_req else None
        return out

    def square(self):
        return self * self

    def abs(self):
        out_req = _grad_enabled and self.requires_grad
        out = Tensor(np.abs(self.data), out_req, (self,) if out_req else ())

        def backward(g):
            self._accumulate(g * np.sign(self.data))
        out._backward = backward if out_req else None
        return out

    def log(self):
        out_req = _grad_enabled and self.requires_grad
        out = Tensor(np.log(self.data), out_req, (self,) if out_req else ())

        def backward(g):
            self._accumulate(g / self.data)
        out._backward = backward if out_req else None
        return out

    def exp(self):
        out_req = _grad_enabled and self.requires_grad
        value = np.exp(self.data)
        out = Tensor(value, out_req, (self,) if out_req else ())

        def backward(g):
            self._accumulate(g * value)
        out._backward = backward if out_req else None
        return out

    def clamp_min(self, floor):
        """max(x, floor); gradient passes only where x > floor."""
        out_req = _grad_enabled and self.requires_grad
        mask = self.data > floor
        out = Tensor(np.where(mask, self.data, floor), out_req,
                     (self,) if out_req else ())

        def backward(g):
            self._accumulate(g * mask)
        out._backward = backward if out_req else None
        return out

    # ---- reductions and shape moves --------------------------------

    def sum(self, axis=None, keepdims=False):
        out_req = _grad_enabled and self.requires_grad
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), out_req,
                     (self,) if out_req else ())

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())
        out._backward = backward if out_req else None
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else (
            np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_req = _grad_enabled and self.requires_grad
        out = Tensor(self.data.reshape(shape), out_req,
                     (self,) if out_req else ())

        def backward(g):
            self._accumulate(g.reshape(self.data.shape))
        out._backward = backward if out_req else None
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        out_req = _grad_enabled and self.requires_grad
        out = Tensor(self.data.transpose(axes), out_req,
                     (self,) if out_req else ())

        def backward(g):
            self._accumulate(g.transpose(inverse))
        out._backward = backward if out_req else None
        return out

    def __getitem__(self, key):
        out_req = _grad_enabled and self.requires_grad
        out = Tensor(self.data[key], out_req, (self,) if out_req else ())

        def backward(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, key, g)
            self._accumulate(buf)
        out._backward = backward if out_req else None
        return out


class Parameter(Tensor):
    """Trainable leaf tensor with a dotted-path name set by its module."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(np.asarray(data, dtype=np.float32),
                         requires_grad=True)
        self.name = name
