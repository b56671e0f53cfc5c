"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Every operation records a closure that pushes the output gradient back to its
inputs. ``Tensor.backward`` walks the recorded graph in reverse topological
order. Only first-order gradients are supported.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "concat",
    "stack",
    "tanh",
    "sigmoid",
    "gelu",
    "conv1d_causal",
    "conv2d",
    "conv_transpose2d",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was used outside its contract (e.g. non-scalar loss root)."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    # make numpy defer reflected operators (ndarray - Tensor) to Tensor
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(self, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return ((a, _unbroadcast(g, sa)), (b, _unbroadcast(g, sb)))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        try:
            data = a.data * c
        except ValueError as exc:
            raise ShapeError(f"mul: {a.shape} vs {c.shape}") from exc
        sa = a.shape
        return _make(data, (a,), lambda g: ((a, _unbroadcast(g * c, sa)),))
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return ((a, _unbroadcast(g * b.data, sa)), (b, _unbroadcast(g * a.data, sb)))

    return _make(data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: ((a, g * (1.0 - y * y)),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: ((a, g * y * (1.0 - y)),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    y = x * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((a, g * (cdf + x * pdf)),)

    return _make(y, (a,), backward)


# -- linear algebra and reductions ---------------------------------------------
def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a @ w`` for ``a`` of shape (..., n) and 2-D ``w`` of shape (n, m)."""
    a, w = as_tensor(a), as_tensor(w)
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {w.shape}")
    data = a.data @ w.data

    def backward(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, w.shape[1])
        return ((a, ga), (w, gw))

    return _make(data, (a, w), backward)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, shape)),)

    return _make(data, (a,), backward)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis), 1.0 / float(n))


def sq_norm(a: Tensor) -> Tensor:
    """Sum of squares of all entries."""
    x = a.data
    return _make(np.sum(x * x), (a,), lambda g: ((a, 2.0 * g * x),))


# -- structural ---------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}") from exc
    return _make(data, (a,), lambda g: ((a, g.reshape(old)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(data, (a,), lambda g: ((a, np.transpose(g, inv)),))


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        if _needs_add_at(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return ((a, full),)

    return _make(np.array(data, copy=True), (a,), backward)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, splits, axis=axis)))

    return _make(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}") from exc

    def backward(g):
        return tuple((t, np.take(g, i, axis=axis)) for i, t in enumerate(tensors))

    return _make(data, tensors, backward)


# -- convolutions ---------------------------------------------------------------
def conv1d_causal(x: Tensor, w: Tensor, b: Tensor | None, dilation: int = 1) -> Tensor:
    """Dilated causal convolution over time.

    ``x`` has shape (B, T, C_in), ``w`` has shape (k, C_in, C_out) and tap ``j``
    reads input ``t - (k - 1 - j) * dilation``; positions before 0 are zero.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d_causal: x {x.shape}, w {w.shape}")
    k = w.shape[0]
    T = x.shape[1]
    pad = (k - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (pad, 0), (0, 0)))
    out = np.zeros((x.shape[0], T, w.shape[2]))
    for j in range(k):
        out += xp[:, j * dilation : j * dilation + T, :] @ w.data[j]
    parents: list[Tensor] = [x, w]
    if b is not None:
        out += b.data
        parents.append(b)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        g2 = g.reshape(-1, g.shape[-1])
        for j in range(k):
            sl = slice(j * dilation, j * dilation + T)
            gxp[:, sl, :] += g @ w.data[j].T
            gw[j] = xp[:, sl, :].reshape(-1, xp.shape[-1]).T @ g2
        res = [(x, gxp[:, pad:, :]), (w, gw)]
        if b is not None:
            res.append((b, g2.sum(axis=0)))
        return res

    return _make(out, parents, backward)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    # x (B, C, H, W), w (O, C, kh, kw) -> (B, O, Ho, Wo)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = _conv_out(H, kh, stride, pad), _conv_out(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((B, Ho, Wo, O))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
            out += np.einsum("bchw,oc->bhwo", patch, w[:, :, i, j], optimize=True)
    return out.transpose(0, 3, 1, 2)


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x_shape
    _, _, kh, kw = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
            gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += contrib
    return gxp[:, :, pad : pad + H, pad : pad + W]


def _conv2d_weight_grad(x: np.ndarray, g: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    _, _, kh, kw = w_shape
    Ho, Wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gw = np.empty(w_shape)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
            gw[:, :, i, j] = np.einsum("bchw,bohw->oc", patch, g, optimize=True)
    return gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x`` (B, C, H, W) and ``w`` (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    out = _conv2d_forward(x.data, w.data, stride, padding)
    parents: list[Tensor] = [x, w]
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        res = [
            (x, _conv2d_input_grad(g, w.data, x.shape, stride, padding)),
            (w, _conv2d_weight_grad(x.data, g, w.shape, stride, padding)),
        ]
        if b is not None:
            res.append((b, g.sum(axis=(0, 2, 3))))
        return res

    return _make(out, parents, backward)


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``x`` (B, C_in, H, W), ``w`` (C_in, C_out, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: x {x.shape}, w {w.shape}")
    B, _, H, W = x.shape
    _, Co, kh, kw = w.shape
    Ho = (H - 1) * stride - 2 * padding + kh + output_padding
    Wo = (W - 1) * stride - 2 * padding + kw + output_padding
    out_shape = (B, Co, Ho, Wo)
    out = _conv2d_input_grad(x.data, w.data, out_shape, stride, padding)
    parents: list[Tensor] = [x, w]
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        res = [
            (x, _conv2d_forward(g, w.data, stride, padding)),
            (w, _conv2d_weight_grad(g, x.data, w.shape, stride, padding)),
        ]
        if b is not None:
            res.append((b, g.sum(axis=(0, 2, 3))))
        return res

    return _make(out, parents, backward)


def numerical_grad(fn: Callable[[], float], params: Iterable[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of a scalar closure w.r.t. each tensor, entrywise."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn()
            flat[i] = orig - eps
            fm = fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out
