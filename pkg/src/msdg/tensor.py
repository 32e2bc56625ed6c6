"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient the result remembers its parents and a closure that maps the
upstream gradient to per-parent gradients. :func:`backward` walks that graph
in reverse topological order.
"""
from __future__ import annotations

import hashlib
import struct
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"MSDG1"


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def std(self, axis=None, keepdims=False):
        return reduce("std", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> "GradMap":
        return backward(self)


GradMap = Dict[Tensor, np.ndarray]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap ``data``; attach ``fn(g, needs) -> grads`` when a parent needs a gradient."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    nd = max(len(a), len(b))
    pa = (1,) * (nd - len(a)) + tuple(a)
    pb = (1,) * (nd - len(b)) + tuple(b)
    out = []
    for dim, (x, y) in enumerate(zip(pa, pb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}: dimension {dim} has extents {x} and {y}")
        out.append(max(x, y))
    return tuple(out)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _first_bad(mask: np.ndarray):
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g, n: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g, n: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g, n):
        return (unbroadcast(g * bd, ad.shape) if n[0] else None,
                unbroadcast(g * ad, bd.shape) if n[1] else None)

    return _node(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError(f"division by zero at divisor index {_first_bad(b.data == 0)}")
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g, n):
        return (unbroadcast(g / bd, ad.shape) if n[0] else None,
                unbroadcast(-g * out / bd, bd.shape) if n[1] else None)

    return _node(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g, n: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g, n: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = ~(a.data > 0)
    if np.any(bad):
        raise DomainError(f"log of nonpositive value at index {_first_bad(bad)}")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g, n: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g, n: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    bad = ~(a.data > 0)
    if np.any(bad):
        raise DomainError(f"sqrt of nonpositive value at index {_first_bad(bad)}")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g, n: (0.5 * g / out,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(exponent)
    return _node(ad ** p, (a,), lambda g, n: (g * p * ad ** (p - 1.0),))


def clip(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes on the closed interval, zero outside."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _node(out, (a,), lambda g, n: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape

    def fn(g, n):
        return (unbroadcast(g * pick_a, sa) if n[0] else None,
                unbroadcast(g * ~pick_a, sb) if n[1] else None)

    return _node(np.minimum(a.data, b.data), (a, b), fn)


_UNARY = {"exp": exp, "log": log, "square": square, "sqrt": sqrt, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape[-1]} vs {b.shape[-2]}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def fn(g, n):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if n[0] else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if n[1] else None
        return ga, gb

    return _node(ad @ bd, (a, b), fn)


def _norm_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x, axes=None, keep: bool = False) -> Tensor:
    """Sum, mean or population standard deviation over ``axes``."""
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    for a in ax:
        if x.shape[a] == 0:
            raise ShapeError(f"cannot reduce over empty axis {a}")
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    shape = x.shape

    def expand(g):
        return g if keep else np.expand_dims(g, ax)

    if kind == "sum":
        out = x.data.sum(axis=ax, keepdims=keep)
        return _node(out, (x,), lambda g, n: (np.broadcast_to(expand(g), shape),))
    if kind == "mean":
        out = x.data.mean(axis=ax, keepdims=keep)
        return _node(out, (x,), lambda g, n: (np.broadcast_to(expand(g) / count, shape),))
    if kind == "std":
        mu = x.data.mean(axis=ax, keepdims=True)
        centred = x.data - mu
        sd = np.sqrt((centred * centred).mean(axis=ax, keepdims=True))
        out = sd if keep else np.squeeze(sd, axis=ax)

        def fn(g, n):
            # zero-variance groups get the zero subgradient
            scale = np.divide(expand(g), count * sd, out=np.zeros_like(sd), where=sd > 0)
            return (centred * scale,)

        return _node(out, (x,), fn)
    raise ValueError(f"unknown reduction {kind!r}")


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def std(x, axis=None, keepdims=False) -> Tensor:
    return reduce("std", x, axis, keepdims)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g, n: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g, n: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g, n):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def fn(g, n):
        out = np.zeros(shape)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(x.data[index], (x,), fn)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def fn(g, n):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(x.data, idx, axis=axis), (x,), fn)


def ones_like(x) -> Tensor:
    return Tensor(np.ones(as_tensor(x).shape))


def zeros_like(x) -> Tensor:
    return Tensor(np.zeros(as_tensor(x).shape))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf.

    The result maps each ``requires_grad`` leaf to an array of its shape; the
    same arrays are also stored on ``leaf.grad``.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every differentiable leaf")
    order = _topo(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: GradMap = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = np.array(g, dtype=np.float64).reshape(node.shape)
            node.grad = leaves[node]
            continue
        needs = tuple(p.requires_grad for p in node._parents)
        pgrads = node._backward(g, needs)
        for p, pg, need in zip(node._parents, pgrads, needs):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is re-evaluated for every coordinate, so it must rebuild its graph
    from the current contents of ``params``.
    """
    for p in params:
        p.requires_grad = True
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise DomainError("objective is not finite")
    analytic = backward(loss)
    worst = 0.0
    for p in params:
        a = analytic.get(p, np.zeros(p.shape)).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().data
            flat[i] = orig - eps
            lo = f().data
            flat[i] = orig
            if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
                raise DomainError("objective is not finite under perturbation")
            num = (float(hi.reshape(-1)[0]) - float(lo.reshape(-1)[0])) / (2 * eps)
            err = abs(a[i] - num) / (abs(a[i]) + 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def tensor_to_bytes(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim > 255:
        raise ShapeError("rank exceeds 255")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns it and the offset just past it."""
    if buf[offset:offset + 5] != MAGIC:
        raise ValueError(f"bad tensor magic at byte {offset}")
    pos = offset + 5
    if len(buf) < pos + 1:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if len(buf) < pos + 4 * rank:
        raise ValueError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise ValueError(f"truncated tensor data: need {end - pos} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
    return Tensor(data), end


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return t


def parameters_checksum(params: Iterable[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
