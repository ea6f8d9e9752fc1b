"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray and records the operations applied
to it; calling :meth:`Tensor.backward` on a scalar result walks the tape in
reverse topological order and accumulates gradients into every tensor that
requires them. Only the operations the networks in this package need are
implemented.

Gradients of broadcasting operations are reduced back to the operand shape
(`_unbroadcast`), so the usual numpy broadcasting rules apply throughout.
"""

from __future__ import annotations

import numpy as np

from . import kernels


_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        t = Tensor(data)
        if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
            t._parents = tuple(parents)
            t._backward = backward
        return t

    def _add_grad(self, g: np.ndarray) -> None:
        if not (self.requires_grad or self._parents):
            return
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward pass --------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)

        def backward(g):
            self._add_grad(_unbroadcast(g, self.shape))
            other._add_grad(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)

        def backward(g):
            self._add_grad(_unbroadcast(g * other.data, self.shape))
            other._add_grad(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __sub__(self, other):
        other = _as_tensor(other)

        def backward(g):
            self._add_grad(_unbroadcast(g, self.shape))
            other._add_grad(_unbroadcast(-g, other.shape))

        return Tensor._make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __truediv__(self, other):
        other = _as_tensor(other)

        def backward(g):
            self._add_grad(_unbroadcast(g / other.data, self.shape))
            other._add_grad(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor._make(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        def backward(g):
            self._add_grad(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent

        def backward(g):
            self._add_grad(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(out_data, (self,), backward)

    # -- matmul ---------------------------------------------------------------

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            self._add_grad(_unbroadcast(ga, self.shape))
            other._add_grad(_unbroadcast(gb, other.shape))

        return Tensor._make(np.matmul(a, b), (self, other), backward)

    # -- nonlinearities ---------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._add_grad(g * out_data)

        return Tensor._make(out_data, (self,), backward)

    def log(self):
        def backward(g):
            self._add_grad(g / self.data)

        return Tensor._make(np.log(self.data), (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            self._add_grad(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            self._add_grad(g * (1.0 - out_data ** 2))

        return Tensor._make(out_data, (self,), backward)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            self._add_grad(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), backward)

    def silu(self):
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * sig

        def backward(g):
            self._add_grad(g * sig * (1.0 + self.data * (1.0 - sig)))

        return Tensor._make(out_data, (self,), backward)

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self._add_grad(g * mask)

        return Tensor._make(self.data * mask, (self,), backward)

    def leaky_relu(self, negative_slope: float = 0.2):
        scale = np.where(self.data > 0, 1.0, negative_slope)

        def backward(g):
            self._add_grad(g * scale)

        return Tensor._make(self.data * scale, (self,), backward)

    def abs(self):
        sign = np.sign(self.data)

        def backward(g):
            self._add_grad(g * sign)

        return Tensor._make(np.abs(self.data), (self,), backward)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._add_grad(np.broadcast_to(g, self.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._add_grad(np.broadcast_to(g, self.shape).copy())

        return Tensor._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape

        def backward(g):
            self._add_grad(g.reshape(old_shape))

        return Tensor._make(self.data.reshape(shape), (self,), backward)

    def transpose(self, axes):
        inv = np.argsort(axes)

        def backward(g):
            self._add_grad(np.transpose(g, inv))

        return Tensor._make(np.transpose(self.data, axes), (self,), backward)

    def __getitem__(self, key):
        def backward(g):
            gx = np.zeros(self.shape, dtype=np.float64)
            gx[key] += g
            self._add_grad(gx)

        return Tensor._make(self.data[key], (self,), backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._add_grad(g[tuple(idx)])

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax composed from primitive ops."""
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None,
           stride: tuple[int, int, int], padding: tuple[int, int, int]) -> Tensor:
    """Strided, zero-padded 3D convolution. x: (N,C,H,W,D), w: (O,C,kh,kw,kd)."""
    sh, sw, sd = stride
    ph, pw, pd = padding
    if any(p > 0 for p in padding):
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw), (pd, pd)))
    else:
        xp = x.data
    out_data = kernels.conv3d_forward(xp, w.data, sh, sw, sd)
    if b is not None:
        out_data = out_data + b.data.reshape(1, -1, 1, 1, 1)
    hp, wp, dp = xp.shape[2:]
    kh, kw, kd = w.shape[2:]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g = np.ascontiguousarray(g)
        gxp = kernels.conv3d_backward_x(g, w.data, hp, wp, dp, sh, sw, sd)
        if any(p > 0 for p in padding):
            gx = gxp[:, :, ph:hp - ph, pw:wp - pw, pd:dp - pd]
        else:
            gx = gxp
        x._add_grad(gx)
        w._add_grad(kernels.conv3d_backward_w(g, xp, kh, kw, kd, sh, sw, sd))
        if b is not None:
            b._add_grad(g.sum(axis=(0, 2, 3, 4)))

    return Tensor._make(out_data, parents, backward)


def upsample_nearest(x: Tensor, factors: tuple[int, int, int]) -> Tensor:
    """Integer nearest-neighbour upsampling of (N,C,H,W,D) along the spatial axes."""
    rh, rw, rd = factors
    out_data = x.data
    if rh > 1:
        out_data = np.repeat(out_data, rh, axis=2)
    if rw > 1:
        out_data = np.repeat(out_data, rw, axis=3)
    if rd > 1:
        out_data = np.repeat(out_data, rd, axis=4)
    n, c, h, w, d = x.shape

    def backward(g):
        g = g.reshape(n, c, h, rh, w, rw, d, rd)
        x._add_grad(g.sum(axis=(3, 5, 7)))

    return Tensor._make(out_data, (x,), backward)


def straight_through(unquantized: Tensor, quantized: np.ndarray | Tensor) -> Tensor:
    """Forward the quantized values, pass gradients through to the unquantized input.

    The backward Jacobian is the identity: whatever gradient arrives at the
    output is routed unchanged to `unquantized`, as if quantization were the
    identity map.
    """
    q = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized, dtype=np.float64)
    if q.shape != unquantized.shape:
        raise ValueError(f"shape mismatch: {unquantized.shape} vs {q.shape}")

    def backward(g):
        unquantized._add_grad(g)

    return Tensor._make(q, (unquantized,), backward)
