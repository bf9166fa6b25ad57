"""Dense fp64 tensors with a tape-based reverse-mode gradient engine.

Every differentiable operation on a :class:`Tensor` appends a node to the
implicit tape (nodes carry a monotonically increasing id).  Reverse
traversal in descending id order is a valid reverse topological order, so
:meth:`Tensor.backward` simply sorts the reachable nodes and replays their
local vector-Jacobian products.

Only the operator set needed by the model is provided.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

MODULUS_FLOOR = 1e-12

_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class BackwardError(RuntimeError):
    pass


class Node:
    __slots__ = ("id", "parents", "vjp", "released")

    def __init__(self, parents: tuple["Tensor", ...], vjp: Callable):
        self.id = next(_node_ids)
        self.parents = parents
        self.vjp = vjp
        self.released = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # ------------------------------------------------------------------
    # basic properties
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------------
    # operators
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if self.data.size != 1:
            raise BackwardError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise BackwardError("loss is detached from every tracked tensor")
        if self._node is None:
            self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
            return
        Tape.from_output(self).run(self)


class Tape:
    """Ordered record of the operations that produced a tensor."""

    def __init__(self, entries: list[tuple[Node, "Tensor"]]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: dict[int, tuple[Node, Tensor]] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            if node.released:
                raise BackwardError(
                    "graph already consumed by a previous backward(); re-run the forward pass"
                )
            seen[node.id] = (node, t)
            stack.extend(node.parents)
        entries = [seen[k] for k in sorted(seen, reverse=True)]
        return cls(entries)

    def run(self, out: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node, tensor in self.entries:
            g = grads.pop(id(tensor), None)
            if g is None:
                node.released = True
                node.vjp = None
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
            node.released = True
            node.vjp = None


# ----------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(tuple(parents), vjp)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), vjp, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        "power",
    )


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def atan2(y, x) -> Tensor:
    """Elementwise angle of (x, y) in (-pi, pi]; (0, 0) maps to 0 with zero gradient."""
    y, x = as_tensor(y), as_tensor(x)
    out = np.arctan2(y.data, x.data)
    # arctan2 returns -pi for (-1, -0.0); fold onto the closed end of the range
    out = np.where(out == -np.pi, np.pi, out)

    def vjp(g):
        den = x.data**2 + y.data**2
        safe = np.where(den > 0, den, 1.0)
        dy = np.where(den > 0, x.data / safe, 0.0)
        dx = np.where(den > 0, -y.data / safe, 0.0)
        return unbroadcast(g * dy, y.shape), unbroadcast(g * dx, x.shape)

    return _make(out, (y, x), vjp, "atan2")


def modulus(r, s) -> Tensor:
    """sqrt(r^2 + s^2) with the floor applied inside the derivative.

    The forward value is exact so the polar round trip is lossless; the
    gradient uses sqrt(r^2 + s^2 + floor) and is therefore bounded (and zero)
    at the origin.
    """
    r, s = as_tensor(r), as_tensor(s)
    out = np.hypot(r.data, s.data)

    def vjp(g):
        den = np.sqrt(r.data**2 + s.data**2 + MODULUS_FLOOR)
        return unbroadcast(g * r.data / den, r.shape), unbroadcast(g * s.data / den, s.shape)

    return _make(out, (r, s), vjp, "modulus")


# ----------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def vjp(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), vjp, "getitem")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, d) by integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), vjp, "embedding")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def split(a, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into equal parts along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis] // sections
    ax = axis % a.ndim
    out = []
    for i in range(sections):
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(i * n, (i + 1) * n)
        out.append(getitem(a, tuple(idx)))
    return out


def where(mask: np.ndarray, a, fill: float) -> Tensor:
    """Keep ``a`` where ``mask`` is true, constant ``fill`` elsewhere."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    return _make(
        np.where(mask, a.data, fill),
        (a,),
        lambda g: (unbroadcast(np.where(mask, g, 0.0), a.shape),),
        "where",
    )


# ----------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


def layer_norm(x, weight, bias, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / sqrt(var + eps) * weight + bias


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return as_tensor(x)
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


# ----------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(
    fn: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor], step: float = 1e-6
) -> dict[str, float]:
    """Compare autodiff against central differences; return rel-err per parameter."""
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    fn().backward()
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numerical_gradient(fn, p, step))
    return errors
