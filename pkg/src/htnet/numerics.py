"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the lifting network needs are provided. Every op builds a
node holding a closure that maps the output gradient to parent gradients;
:meth:`Tensor.backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = _pair(self, other)
        return add(a, neg(b))

    def __rsub__(self, other):
        a, b = _pair(other, self)
        return add(a, neg(b))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=as_tensor(b).data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: _accumulate(a, np.transpose(g, inverse)))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat_channels: leading shapes differ: {[p.shape for p in parts]}")
    sizes = [p.shape[-1] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, bounds, axis=-1)):
            _accumulate(p, gp)

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, backward)


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to {a.shape[-1]}")
    out = []
    start = 0
    for size in sizes:
        sl = slice(start, start + size)

        def backward(g, sl=sl):
            full = np.zeros_like(a.data)
            full[..., sl] = g
            _accumulate(a, full)

        out.append(_make(a.data[..., sl], (a,), backward))
        start += size
    return out


def _check_index(index) -> np.ndarray:
    if isinstance(index, Tensor):
        raise TypeError("gather/scatter indices are constants and cannot be Tensors")
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"indices must be integers, got dtype {idx.dtype}")
    return idx


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Gather along the joint axis (second to last)."""
    idx = _check_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (..., idx, slice(None)), g)
        _accumulate(a, full)

    return _make(a.data[..., idx, :], (a,), backward)


def scatter_rows(a: Tensor, index: Sequence[int], n: int) -> Tensor:
    """Place row ``k`` of ``a`` at joint ``index[k]`` of an ``n``-row zero map."""
    idx = _check_index(index)
    if len(set(idx.tolist())) != len(idx):
        raise ValueError("scatter_rows destinations must be unique")
    if a.shape[-2] != len(idx):
        raise ShapeError(f"scatter_rows: {a.shape[-2]} rows for {len(idx)} indices")
    shape = a.shape[:-2] + (n, a.shape[-1])
    out = np.zeros(shape, dtype=a.data.dtype)
    out[..., idx, :] = a.data
    return _make(out, (a,), lambda g: _accumulate(a, g[..., idx, :]))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (a,), backward)


def layer_norm(a: Tensor, scale: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the channel (last) axis, then apply scale and shift."""
    if scale.shape != (a.shape[-1],) or shift.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} vs input {a.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std

    def backward(g):
        if scale.requires_grad:
            _accumulate(scale, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if shift.requires_grad:
            _accumulate(shift, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * scale.data
            gx = inv_std * (
                gx - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(a, gx)

    return _make(xhat * scale.data + shift.data, (a, scale, shift), backward)


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean_sq(a: Tensor) -> Tensor:
    """Mean of squared entries."""
    n = a.data.size

    def backward(g):
        _accumulate(a, g * 2.0 * a.data / n)

    return _make(np.asarray((a.data * a.data).sum() / n), (a,), backward)


def grad(output: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each of ``params``.

    Parameters that do not influence the output receive zero gradients.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError(f"{p!r} does not require gradients")
        p.grad = None
    output.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
