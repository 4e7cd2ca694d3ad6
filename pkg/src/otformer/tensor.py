"""Numpy-backed tensors with reverse-mode differentiation.

Hidden states follow the column convention: a sequence of ``n`` tokens of
width ``d`` is a ``(d, n)`` array, and a batch is ``(B, d, n)``. Every op
here accepts optional leading batch axes.
"""
from __future__ import annotations

import contextlib
import enum
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.F32 else np.float64)

    @classmethod
    def of(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        if isinstance(value, str):
            return cls(value.lower())
        dt = np.dtype(value)
        if dt == np.float32:
            return cls.F32
        if dt == np.float64:
            return cls.F64
        raise ValueError(f"unsupported precision {value!r}")


class DimensionError(ValueError):
    pass


class PrecisionError(TypeError):
    pass


class GraphError(RuntimeError):
    pass


_grad_enabled = True


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


class Tensor:
    """Dense float array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, precision=None, name: str | None = None):
        if precision is not None:
            dtype = Precision.of(precision).dtype
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; scale by a python number")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation ------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _raise_not_scalar(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, precision=Precision.F64, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, precision=precision, name=name)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise PrecisionError(f"mixed precision in one graph: {like.dtype} and {x.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    raise TypeError("at least one operand must be a Tensor")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    inner = c * (xd + k * (xd * xd * xd))
    th = np.tanh(inner)
    out = half * xd * (1 + th)

    def bw(g):
        dinner = c * (1 + 3 * k * (xd * xd))
        return (g * (half * (1 + th) + half * xd * (1 - th * th) * dinner),)

    return _make(out, (x,), bw)


def relu_or_gelu(x: Tensor, kind: str = "gelu") -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def frobenius_sq(x: Tensor, axis=None) -> Tensor:
    """Sum of squared entries; ``axis`` restricts the sum (e.g. ``(-2, -1)`` per sample)."""
    axes = _norm_axes(axis, x.ndim)
    xd = x.data
    out = np.asarray((xd * xd).sum(axis=axes))

    def bw(g):
        return (2 * np.expand_dims(g, axes) * xd,)

    return _make(out, (x,), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs ndim >= 2, got shape {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    first = tensors[0]
    tensors = [first] + [_lift(t, first) for t in tensors[1:]]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), bw)


def concat_heads(heads: Sequence[Tensor]) -> Tensor:
    """Stack per-head ``(k, n)`` blocks into one ``(H*k, n)`` block."""
    return concat(heads, axis=-2)


def index_select(x: Tensor, index) -> Tensor:
    shape = x.shape
    dtype = x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), bw)


def slice_tokens(x: Tensor, index) -> Tensor:
    """Select token columns (last axis)."""
    if isinstance(index, int):
        n = x.shape[-1]
        if not -n <= index < n:
            raise DimensionError(f"token index {index} out of range for n={n}")
    return index_select(x, (Ellipsis, index))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` (vocab, d) gathered by integer ``ids``; result ``(*ids.shape, d)``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of vocabulary range [0, {table.shape[0]})")
    return index_select(table, ids)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {old} to {shape}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 2-D weight times batched activations folds into a single GEMM
    if a.ndim == 2 and b.ndim > 2:
        out = np.tensordot(a, b, axes=([1], [b.ndim - 2]))
        return np.ascontiguousarray(np.moveaxis(out, 0, -2))
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*lead, b.shape[-1])
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and g.ndim > 2:
                axes = list(range(g.ndim - 2)) + [g.ndim - 1]
                ga = np.tensordot(g, bd, axes=(axes, axes))
            else:
                ga = _unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                axes = list(range(g.ndim - 1))
                gb = np.tensordot(ad, g, axes=(axes, axes))
            else:
                gb = _unbroadcast(_mm(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(_mm(ad, bd), (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def softmax_columns(x: Tensor) -> Tensor:
    """Softmax over axis -2, so every column of every matrix sums to one."""
    xd = x.data
    z = xd - xd.max(axis=-2, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-2, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-2, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -2, eps: float = LN_EPS) -> Tensor:
    """Normalise along ``axis`` (the feature axis) then apply ``gain``/``bias``.

    ``gain`` and ``bias`` must broadcast against ``x``; for token columns
    of shape ``(d, n)`` they are ``(d, 1)``.
    """
    gain = _lift(gain, x)
    bias = _lift(bias, x)
    _check_broadcast(x, gain, "layer_norm")
    _check_broadcast(x, bias, "layer_norm")
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-sample softmax cross-entropy; ``logits`` is ``(B, C)``, result ``(B,)``."""
    targets = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2 or targets.shape != (ld.shape[0],):
        raise DimensionError(f"cross_entropy: logits {ld.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= ld.shape[1]):
        raise IndexError("target label outside [0, C)")
    z = ld - ld.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(ld.shape[0])
    out = -logp[rows, targets]

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1
        return (p * g[:, None],)

    return _make(out, (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)}
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
