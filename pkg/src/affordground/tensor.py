"""Minimal reverse-mode differentiable array engine.

Every tensor holds a float64 ``numpy`` array. Operations on tensors that
require gradients append a node to the computation record; node ids are drawn
from a global counter, so sorting reachable nodes by descending id visits them
in exact reverse append order during ``backward``.

Broadcasting is restricted to full-shape, per-row (``C x 1``), per-column
(``1 x N``) and scalar (all-ones shape) operands.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_counter = itertools.count()

# op names whose backward rule has its sign flipped (negative-control hook)
_SIGN_FLIPS: set[str] = set()
_RECORDING = [True]
# active branch log: which side of each kink or selection a forward pass took
_BRANCHES: list[list[bytes] | None] = [None]


def record_branch(choice: np.ndarray) -> None:
    """Log a piecewise choice (ReLU sign, argmax, top-k set) of the current forward pass."""
    log_ = _BRANCHES[0]
    if log_ is not None:
        log_.append(np.ascontiguousarray(choice).tobytes())


def _branch_trace(fn: Callable[[], "Tensor"]) -> tuple[float, tuple[bytes, ...]]:
    prev = _BRANCHES[0]
    _BRANCHES[0] = []
    try:
        value = float(fn().data.sum())
        return value, tuple(_BRANCHES[0])
    finally:
        _BRANCHES[0] = prev


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.node_id = next(_node_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node_id = next(_node_counter)
    out.op = op
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


@contextlib.contextmanager
def no_grad():
    """Evaluate without appending to the computation record."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


@contextlib.contextmanager
def inject_sign_flip(*ops: str):
    """Flip the sign of the named ops' backward rules inside the block."""
    added = [op for op in ops if op not in _SIGN_FLIPS]
    _SIGN_FLIPS.update(added)
    try:
        yield
    finally:
        _SIGN_FLIPS.difference_update(added)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    With ``params`` given, returns ``{id(param): grad}`` where parameters not
    reachable from ``loss`` get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes or not t.requires_grad:
            continue
        nodes[t.node_id] = t
        stack.extend(t.parents)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.backward_fn is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.backward_fn(g)
        if t.op in _SIGN_FLIPS:
            parent_grads = tuple(None if pg is None else -pg for pg in parent_grads)
        for p, pg in zip(t.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = pg

    if params is None:
        return None
    return {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# ---------------------------------------------------------------------------
# linear algebra and structural ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), bw, "matmul")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take_cols(x: Tensor, idx) -> Tensor:
    """Gather columns ``x[:, idx]``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _make(x.data[:, idx], (x,), bw, "take_cols")


def take_rows(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "take_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _make(x.data[start:stop].copy(), (x,), bw, "slice_rows")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def group_max(x: Tensor, group: int) -> Tensor:
    """Max over consecutive column groups of size ``group``: [C x m*group] -> [C x m].

    Gradient goes to the argmax entry; ties resolve to the lowest index.
    """
    x = as_tensor(x)
    C, total = x.shape
    if total % group:
        raise ShapeError(f"group_max: {total} columns not divisible by group {group}")
    m = total // group
    blocks = x.data.reshape(C, m, group)
    arg = blocks.argmax(axis=2)
    record_branch(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=2)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=2)
        return (gb.reshape(C, total),)

    return _make(out, (x,), bw, "group_max")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: int | None = None, keepdims: bool = True) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None, keepdims: bool = True) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax; entries where ``mask`` is False get probability 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise DomainError("softmax: a slice has every entry masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _binary(a, b, fwd, bw_a, bw_b, op):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, op)
    A, B = a.data, b.data
    out = fwd(A, B)

    def bw(g):
        ga = _unbroadcast(bw_a(g, A, B, out), A.shape) if a.requires_grad else None
        gb = _unbroadcast(bw_b(g, A, B, out), B.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, A, B, o: g, lambda g, A, B, o: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, A, B, o: g, lambda g, A, B, o: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, A, B, o: g * B, lambda g, A, B, o: g * A, "mul")


def div(a, b) -> Tensor:
    b_t = as_tensor(b)
    if np.any(b_t.data == 0):
        raise DomainError("div: division by zero")
    return _binary(a, b_t, np.divide, lambda g, A, B, o: g / B, lambda g, A, B, o: -g * o / B, "div")


def minimum(a, b) -> Tensor:
    # ties send the gradient to the first operand
    record_branch(as_tensor(a).data <= as_tensor(b).data)
    return _binary(a, b, np.minimum,
                   lambda g, A, B, o: g * (A <= B), lambda g, A, B, o: g * (B < A), "min")


def maximum(a, b) -> Tensor:
    record_branch(as_tensor(a).data >= as_tensor(b).data)
    return _binary(a, b, np.maximum,
                   lambda g, A, B, o: g * (A >= B), lambda g, A, B, o: g * (B > A), "max")


def _unary(x, fwd, bw_fn, op):
    x = as_tensor(x)
    X = x.data
    out = fwd(X)
    return _make(out, (x,), lambda g: (bw_fn(g, X, out),), op)


def scale(x, c: float) -> Tensor:
    c = float(c)
    return _unary(x, lambda X: X * c, lambda g, X, o: g * c, "scale")


def sigmoid(x) -> Tensor:
    def fwd(X):
        # split by sign so exp never overflows
        out = np.empty_like(X)
        pos = X >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
        ex = np.exp(X[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(x, fwd, lambda g, X, o: g * o * (1.0 - o), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    record_branch(x.data > 0)
    return _unary(x, lambda X: np.maximum(X, 0.0), lambda g, X, o: g * (X > 0), "relu")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive input")
    return _unary(x, np.log, lambda g, X, o: g / X, "log")


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda g, X, o: g * o, "exp")


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    record_branch(x.data > 0)
    return _unary(x, np.abs, lambda g, X, o: g * np.sign(X), "abs")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("sqrt: non-positive input")
    return _unary(x, np.sqrt, lambda g, X, o: g * 0.5 / o, "sqrt")


def power(x, p: float) -> Tensor:
    p = float(p)
    x = as_tensor(x)
    if p < 1 and np.any(x.data < 0):
        raise DomainError("power: negative base with fractional exponent")
    return _unary(x, lambda X: X ** p, lambda g, X, o: g * p * X ** (p - 1.0), "power")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "min": minimum, "max": maximum,
    "sigmoid": sigmoid, "relu": relu, "log": log, "exp": exp, "abs": abs, "sqrt": sqrt,
}


def elementwise(kind: str, *inputs, factor: float | None = None) -> Tensor:
    """Dispatch by op name; ``scale`` takes its constant through ``factor``."""
    if kind == "scale":
        return scale(inputs[0], 1.0 if factor is None else factor)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# composites used across modules
# ---------------------------------------------------------------------------

def norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries, as a scalar tensor."""
    return sqrt(sum(mul(x, x)))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    na, nb = norm(a), norm(b)
    if na.item() == 0 or nb.item() == 0:
        raise DomainError("cosine: zero-norm vector")
    return div(sum(mul(a, b)), mul(na, nb))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class NondeterministicError(RuntimeError):
    pass


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``max_entries`` caps the number of checked entries per parameter (sampled
    with a fixed seed). When the two stencil points fall on different sides of
    a kink or selection switch (per the branch log), the one-sided difference
    on the side matching the analytic branch is used instead; such entries are
    counted in ``one_sided`` and entries with both sides switched in
    ``unresolved``. Returns ``{"max_rel_err": {name: err}, "failed": [...],
    "passed": bool, "one_sided": int, "unresolved": [...]}``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}

    first, second = fn().data.copy(), fn().data.copy()
    if not np.array_equal(first, second):
        raise NondeterministicError("function returned different values on repeated calls")

    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    f0, base = _branch_trace(fn)

    rng = np.random.default_rng(seed)
    report = {"max_rel_err": {}, "failed": [], "passed": True, "one_sided": 0, "unresolved": []}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, branch_p = _branch_trace(fn)
            flat[i] = orig - h
            fm, branch_m = _branch_trace(fn)
            flat[i] = orig
            if branch_p == base and branch_m == base:
                num = (fp - fm) / (2 * h)
            elif branch_p == base:
                num, report["one_sided"] = (fp - f0) / h, report["one_sided"] + 1
            elif branch_m == base:
                num, report["one_sided"] = (f0 - fm) / h, report["one_sided"] + 1
            else:
                report["unresolved"].append((name, int(i)))
                continue
            ana = float(analytic[name].reshape(-1)[i])
            rel = np.abs(ana - num) / max(1e-8, np.abs(ana) + np.abs(num))
            worst = max(worst, rel)
            if rel > tol:
                report["failed"].append((name, int(i), ana, num, rel))
        report["max_rel_err"][name] = worst
        p.grad = None
    report["passed"] = not report["failed"]
    return report


# ---------------------------------------------------------------------------
# dump format
# ---------------------------------------------------------------------------

def dumps(x: Tensor | np.ndarray) -> str:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    header = "shape: " + " ".join(str(d) for d in arr.shape)
    return header + "\n" + " ".join(repr(float(v)) for v in arr.reshape(-1)) + "\n"


def loads(text: str) -> Tensor:
    lines = text.strip().split("\n", 1)
    head = lines[0].strip()
    if not head.startswith("shape:"):
        raise ValueError("tensor dump must start with 'shape:'")
    shape = tuple(int(d) for d in head[len("shape:"):].split())
    body = lines[1].split() if len(lines) > 1 else []
    vals = np.array([float(v) for v in body], dtype=np.float64)
    if vals.size != int(np.prod(shape)):
        raise ShapeError(f"dump declares shape {shape} but holds {vals.size} values")
    return Tensor(vals.reshape(shape))
