"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the primitives needed by the grouping head and its losses are provided.
Every primitive returns a :class:`Tensor` that remembers its inputs and a
vector-Jacobian closure; :func:`backward` walks the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12

_grad_enabled = True
_freezer: "_Freezer | None" = None


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {joined}")


class DomainError(ValueError):
    """Raised on log of a non-positive value or division by zero."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "kind", "parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.kind = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, kind={self.kind}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(kind: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.kind = kind
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(items: Sequence) -> Tensor:
    items = [as_tensor(t) for t in items]
    if not items:
        raise ShapeError("concat-rows")
    cols = {t.shape[1:] for t in items}
    if len(cols) != 1 or any(t.data.ndim != 2 for t in items):
        raise ShapeError("concat-rows", *(t.shape for t in items))
    bounds = np.cumsum([0] + [t.shape[0] for t in items])

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(items)))

    return _make("concat-rows", np.concatenate([t.data for t in items], axis=0), items, vjp)


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("row-softmax", s, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make("div", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    """max(0, x); subgradient 0 at exactly 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _make("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_normalize(a) -> Tensor:
    """Row-wise x / max(||x||, 1e-12)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("l2-normalize", a.shape)
    norms = np.sqrt((a.data**2).sum(axis=1, keepdims=True))
    floored = norms <= NORM_FLOOR
    denom = np.where(floored, NORM_FLOOR, norms)
    y = a.data / denom

    def vjp(g):
        radial = np.where(floored, 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - radial * y) / denom,)

    return _make("l2-normalize", y, (a,), vjp)


def cosine_similarity(a, b=None) -> Tensor:
    """Pairwise cosine between the rows of ``a`` and the rows of ``b``.

    Zero rows have cosine 0 with everything.
    """
    a = as_tensor(a)
    na = l2_normalize(a)
    nb = na if b is None else l2_normalize(as_tensor(b))
    if na.shape[1] != nb.shape[1]:
        raise ShapeError("cosine-similarity", a.shape, nb.shape)
    return matmul(na, transpose(nb))


def stop_gradient(a) -> Tensor:
    """Identity in value, zero in gradient.

    Inside :func:`frozen_detached` the value is recorded on the first pass
    and replayed on later passes, so that finite differences see the same
    constants the analytic gradient treats as fixed.
    """
    a = as_tensor(a)
    data = a.data.copy()
    if _freezer is not None:
        data = _freezer.visit(data)
    out = Tensor(data)
    out.kind = "stop-gradient"
    return out


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.shape[0])):
        raise ShapeError("gather-rows", a.shape, index.shape)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make("gather-rows", a.data[index].copy(), (a,), vjp)


def one_hot(index, depth: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= depth)):
        raise ShapeError("one-hot", index.shape, (depth,))
    out = np.zeros((index.size, depth))
    out[np.arange(index.size), index] = 1.0
    t = Tensor(out)
    t.kind = "one-hot"
    return t


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "transpose": transpose,
    "concat-rows": lambda *xs: concat_rows(xs),
    "row-softmax": row_softmax,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "clamp": clamp,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "l2-normalize": l2_normalize,
    "cosine-similarity": cosine_similarity,
    "stop-gradient": stop_gradient,
    "gather-rows": gather_rows,
    "one-hot": one_hot,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.parents]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through the recorded graph.

    Leaf tensors with ``requires_grad`` get their ``.grad`` set. If ``params``
    is given, returns their gradients in order (zeros for unused tensors);
    otherwise returns a dict keyed by ``id(tensor)``.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        graph = Graph.trace(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in graph.leaves():
            if id(node) in grads:
                node.grad = grads[id(node)]
    if params is None:
        return grads
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# --------------------------------------------------------------- grad check


class _Freezer:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replay = False
        self.cursor = 0

    def visit(self, data: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.values.append(data.copy())
            return data
        if self.cursor >= len(self.values):
            raise RuntimeError("detached-value replay diverged from the recorded pass")
        out = self.values[self.cursor]
        self.cursor += 1
        return out.copy()


@contextlib.contextmanager
def frozen_detached(freezer: _Freezer):
    global _freezer
    prev = _freezer
    _freezer = freezer
    freezer.cursor = 0
    try:
        yield freezer
    finally:
        _freezer = prev


@dataclass
class GradReport:
    max_abs_error: dict[str, float]
    max_rel_error: dict[str, float]
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def worst_relative(self, min_grad: float = 0.0) -> float:
        """Largest relative error over entries whose analytic |grad| exceeds ``min_grad``."""
        worst = 0.0
        for name, a in self.analytic.items():
            n = self.numeric[name]
            sel = np.abs(a) > min_grad
            if np.any(sel):
                worst = max(worst, float(np.max(_rel(a[sel], n[sel]))))
        return worst

    def tensor_relative(self, min_grad: float = 0.0) -> dict[str, float]:
        """Per tensor, max|a - n| / max(max|a|, max|n|), for tensors whose largest
        analytic |grad| exceeds ``min_grad``.

        Entries much smaller than the tensor's largest gradient are dominated by
        float64 cancellation in the difference quotient, so the error is scaled
        by the tensor's gradient magnitude rather than each entry's own.
        """
        out = {}
        for name, a in self.analytic.items():
            n = self.numeric[name]
            if a.size == 0 or np.abs(a).max() <= min_grad:
                continue
            scale = max(np.abs(a).max(), np.abs(n).max())
            out[name] = float(np.abs(a - n).max() / scale)
        return out


def _rel(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    return np.abs(a - n) / denom


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
               names: Sequence[str] | None = None) -> GradReport:
    """Compare analytic gradients of ``fn()`` with central differences.

    ``fn`` must be deterministic (freeze any noise it draws). Values passing
    through :func:`stop_gradient` are held at their base-point values during
    the perturbed evaluations, which is exactly the function the analytic
    gradient differentiates.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(params)]
    freezer = _Freezer()
    with frozen_detached(freezer):
        loss = fn()
    analytic = backward(loss, params)
    freezer.replay = True

    report = GradReport({}, {})
    for name, p, a in zip(names, params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            with no_grad(), frozen_detached(freezer):
                fp = fn().item()
            flat[k] = orig - epsilon
            with no_grad(), frozen_detached(freezer):
                fm = fn().item()
            flat[k] = orig
            nflat[k] = (fp - fm) / (2.0 * epsilon)
        err = np.abs(a - numeric)
        report.max_abs_error[name] = float(err.max()) if err.size else 0.0
        report.max_rel_error[name] = float(_rel(a, numeric).max()) if err.size else 0.0
        report.analytic[name] = a
        report.numeric[name] = numeric
    return report


def sample_gumbel(shape, rng: np.random.Generator) -> Tensor:
    """I.i.d. Gumbel(0, 1) samples, -log(-log(u)) with u in the open unit interval."""
    u = rng.random(shape)
    # random() is on [0, 1); redraw exact zeros
    while np.any(u == 0.0):
        zeros = u == 0.0
        u[zeros] = rng.random(int(zeros.sum()))
    return Tensor(gumbel_from_uniform(u))


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return -np.log(-np.log(u))
