"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations needed by the normalized convolutional networks in this
package are provided. Every op records a closure on its output that maps the
output gradient to input gradients; ``Tensor.backward`` walks the recorded
graph in reverse topological order and accumulates into ``.grad`` of leaves.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


DEFAULT_DTYPE = np.float64


class Tensor:
    """An n-dimensional float array with an optional gradient tape entry."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if is_float else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- autograd
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every leaf reachable from this tensor.

        The recorded graph is released afterwards, so a graph can only be
        differentiated once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._parents = ()
            node._backward = None

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF, elementwise."""
    a = as_tensor(a)
    pdf = np.exp(-0.5 * a.data**2) / np.sqrt(2 * np.pi)
    return _make(special.ndtr(a.data), (a,), lambda g: (g * pdf,))


def normal_pdf(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(-0.5 * a.data**2) / np.sqrt(2 * np.pi)
    return _make(out, (a,), lambda g: (-g * a.data * out,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """``x`` for ``x >= 0`` else ``slope * x``; the derivative at 0 is 1."""
    x = as_tensor(x)
    factor = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def piecewise_sigma(u: Tensor) -> Tensor:
    """exp(u) for u < 0 and u + 1 for u >= 0 (C1 at the joint)."""
    u = as_tensor(u)
    neg = u.data < 0
    e = np.exp(np.minimum(u.data, 0.0))
    out = np.where(neg, e, u.data + 1.0)
    deriv = np.where(neg, e, 1.0)
    return _make(out, (u,), lambda g: (g * deriv,))


# ------------------------------------------------------------------ structure
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# ----------------------------------------------------------------- reductions
def _axes(a: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(a.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax % a.ndim for ax in axis)
    if not axes:
        raise ValueError("empty reduction dims")
    return axes


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(a, axis)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(a, axis)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axes, keepdims) * (1.0 / n)


def reduce_var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (1/n normalization)."""
    a = as_tensor(a)
    axes = _axes(a, axis)
    centered = a - reduce_mean(a, axes, keepdims=True)
    return reduce_mean(centered * centered, axes, keepdims)


# ---------------------------------------------------------------- linear maps
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv_output_size(size: int, ksize: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - ksize) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[k, c, h, w]`` with ``w[o, c, kh, kw]`` (zero padding)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    k, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: (k*ho*wo, c*kh*kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(k * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(k, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (g2 @ wmat).reshape(k, ho, wo, c, kh, kw)
        gcols = np.ascontiguousarray(gcols.transpose(4, 5, 0, 3, 1, 2))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), back)


def avg_pool2d(x: Tensor, ksize: int) -> Tensor:
    """Non-overlapping average pooling with stride equal to ``ksize``."""
    x = as_tensor(x)
    k, c, h, w = x.shape
    if h % ksize or w % ksize:
        raise ValueError(f"spatial size {h}x{w} not divisible by pool size {ksize}")
    blocks = x.reshape(k, c, h // ksize, ksize, w // ksize, ksize)
    return reduce_mean(blocks, (3, 5))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial dims: ``[k, c, h, w] -> [k, c]``."""
    return reduce_mean(x, (2, 3))


# ------------------------------------------------------------------- outputs
def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("log_softmax expects [k, c] logits with c >= 2")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def nll_loss(logp: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``labels`` under log-probabilities."""
    logp = as_tensor(logp)
    labels = np.asarray(labels)
    k, c = logp.shape
    if labels.shape != (k,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("label out of range")
    rows = np.arange(k)
    picked = -logp.data[rows, labels]
    scale = 1.0 / k if reduction == "mean" else 1.0
    out = np.asarray(picked.sum() * scale if reduction != "none" else picked)

    def back(g):
        full = np.zeros_like(logp.data)
        full[rows, labels] = -(g * scale if reduction != "none" else g)
        return (full,)

    return _make(out, (logp,), back)


# ------------------------------------------------------------- verification
def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Relative error ``|a - n| / (|a| + |n|)`` between tape and finite-difference gradients.

    ``fn`` maps tensors to a scalar tensor; norms are taken over each input's
    full gradient and the worst input is reported.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numerical_grad(lambda: fn(*[Tensor(b) for b in arrays]).item(), a, h)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        denom = max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
