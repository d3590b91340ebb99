"""Small reverse-mode autodiff over dense float64 arrays.

Operations record themselves on the innermost active :class:`Tape`; outside a
tape they simply compute values, which is what inference code (sampling,
evaluation) relies on.  Only nodes with at least one grad-requiring parent are
recorded, so a constant subgraph has an exactly zero gradient.

Example
-------
>>> x = Tensor(3.0, requires_grad=True)
>>> with Tape() as tape:
...     y = x * x
>>> tape.backward(y)[x]
array(6.)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible; carries the node id that failed."""

    def __init__(self, node_id: int, msg: str):
        super().__init__(f"node {node_id}: {msg}")
        self.node_id = node_id


class NonFiniteError(FloatingPointError):
    """A forward value contains NaN or inf."""

    def __init__(self, node_id: int, op: str):
        super().__init__(f"node {node_id} ({op}) produced a non-finite value")
        self.node_id = node_id
        self.op = op


class Tensor:
    """A float64 array that may participate in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class Node:
    op: str
    parents: tuple[Tensor, ...]
    out: Tensor
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of the operations run while the tape is active.

    Nodes are appended in execution order, so parents always precede
    children and a reverse sweep is a valid backward pass.
    """

    nodes: list[Node] = field(default_factory=list)
    check_finite: bool = True

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, output_grad=None) -> dict[Tensor, np.ndarray]:
        """Accumulate d(output)/d(leaf) for every grad-requiring leaf.

        Returns a mapping from tensor to gradient (keyed by identity) and also
        adds each leaf gradient into ``leaf.grad``.
        """
        if not self.nodes:
            raise RuntimeError("backward called on an empty tape; run a forward pass first")
        if output_grad is None:
            if output.size != 1:
                raise ValueError("output_grad required for non-scalar outputs")
            output_grad = np.ones_like(output.data)
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != output.shape:
            raise ShapeError(-1, f"output_grad shape {output_grad.shape} != {output.shape}")

        grads: dict[int, np.ndarray] = {id(output): output_grad}
        recorded = {id(node.out) for node in self.nodes}
        if id(output) not in recorded and not output.requires_grad:
            raise RuntimeError("output was not produced on this tape")
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in recorded:
                    leaves[key] = parent
        if id(output) not in recorded:
            leaves[id(output)] = output
        result = GradMap()
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        return result


class GradMap(dict):
    """dict keyed by tensor identity; missing keys read as zero gradients."""

    def __setitem__(self, key, value):
        super().__setitem__(id(key), (key, value))

    def __getitem__(self, key):
        hit = super().get(id(key))
        if hit is None:
            return np.zeros_like(key.data)
        return hit[1]

    def __contains__(self, key):
        return super().__contains__(id(key))

    def items(self):
        return list(super().values())


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, parents: tuple, vjp) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is not None and tape.check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(len(tape.nodes), op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(Node(op, parents, out, vjp))
    return out


def _node_id() -> int:
    return len(_ACTIVE[-1].nodes) if _ACTIVE else -1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(_node_id(), f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a.data, b.data)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a.data, b.data)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a.data, b.data)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _record("div", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def minimum(a, cap: float) -> Tensor:
    """Elementwise min(a, cap); gradient is zero where the cap binds."""
    a = _as_tensor(a)
    keep = a.data < cap
    return _record("minimum", np.where(keep, a.data, cap), (a,), lambda g: (g * keep,))


# -- linear algebra / shape --------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(_node_id(), f"matmul: {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(_node_id(), f"reshape: {a.shape} -> {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(_node_id(), f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, ts, vjp)


def slice_(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _record("slice", np.array(out, dtype=np.float64), (a,), vjp)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- reductions --------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _record("logsumexp", out, (a,), vjp)


# -- elementwise unary -------------------------------------------------------

def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record("softplus", out, (a,), lambda g: (g * sig,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs_smooth(a, eps: float = 1e-12) -> Tensor:
    """sqrt(x^2 + eps): a differentiable stand-in for |x|."""
    a = _as_tensor(a)
    out = np.sqrt(a.data * a.data + eps)
    return _record("abs_smooth", out, (a,), lambda g: (g * a.data / out,))


def softmax(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data / temperature
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _record("softmax", out, (a,), vjp)


def log_softmax(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data / temperature
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    soft = np.exp(out)

    def vjp(g):
        return ((g - soft * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _record("log_softmax", out, (a,), vjp)


# Lanczos approximation, g=7, n=9.
_LANCZOS_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993, 676.5203681218851, -1259.1392167224028,
    771.32342877765313, -176.61502916214059, 12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _lanczos_parts(x: np.ndarray):
    z = x - 1.0
    k = np.arange(1, 9, dtype=np.float64)
    denom = z[..., None] + k
    series = _LANCZOS[0] + (_LANCZOS[1:] / denom).sum(axis=-1)
    dseries = -(_LANCZOS[1:] / denom**2).sum(axis=-1)
    t = z + _LANCZOS_G + 0.5
    return z, t, series, dseries


def lgamma_value(x) -> np.ndarray:
    """log Gamma(x) for x > 0 via Lanczos (reflection below 0.5)."""
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    xr = np.where(small, 1.0 - x, x)
    z, t, series, _ = _lanczos_parts(xr)
    val = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)
    with np.errstate(divide="ignore", invalid="ignore"):
        refl = math.log(math.pi) - np.log(np.abs(np.sin(math.pi * x))) - val
    return np.where(small, refl, val)


def digamma_value(x) -> np.ndarray:
    """Derivative of :func:`lgamma_value` for x >= 0.5."""
    x = np.asarray(x, dtype=np.float64)
    z, t, series, dseries = _lanczos_parts(x)
    return np.log(t) + (z + 0.5) / t - 1.0 + dseries / series


def lgamma(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.5):
        raise ValueError("differentiable lgamma requires arguments >= 0.5")
    out = lgamma_value(a.data)
    return _record("lgamma", out, (a,), lambda g: (g * digamma_value(a.data),))


# -- optimisation ------------------------------------------------------------

@dataclass
class OptState:
    """Adam moments and hyperparameters (decoupled weight decay)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    skipped: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptState,
              lr: float | None = None) -> bool:
    """Apply one AdamW update in place. Returns False if skipped (non-finite grads)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {p.name}: {g.shape} vs {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def one_cycle_lr(step: int, total: int, peak: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine one-cycle learning rate at ``step`` (0-based) of ``total``."""
    if total <= 1:
        return peak
    start, end = peak / div_factor, peak / final_div
    up = max(1, int(round(pct_start * total)))
    if step < up:
        frac = step / up
        return start + (peak - start) * 0.5 * (1 - math.cos(math.pi * frac))
    frac = min(1.0, (step - up) / max(1, total - 1 - up))
    return end + (peak - end) * 0.5 * (1 + math.cos(math.pi * frac))


def grad_check(fn: Callable[[list[Tensor]], Tensor], point, h: float = 1e-5,
               coords: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 0.0) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` receives a list of grad-requiring tensors built from ``point`` (an
    array or a list of arrays) and must return a scalar tensor.  ``coords``
    limits the finite-difference sweep to a random subset of coordinates.
    The error is |ad - fd| / (max(|fd|, floor) + 1e-12); a positive ``floor``
    stops coordinates with near-zero gradients, where central differences are
    dominated by rounding, from deciding the result.
    """
    arrays = [np.array(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(params)
    grads = tape.backward(out)
    auto = [grads[p] for p in params]

    def value() -> float:
        return float(fn([Tensor(p.data) for p in params]).data)

    index = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if coords is not None and coords < len(index):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(index), size=coords, replace=False)
        index = [index[k] for k in sorted(pick)]
    worst = 0.0
    for i, j in index:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = value()
        flat[j] = orig - h
        down = value()
        flat[j] = orig
        fd = (up - down) / (2.0 * h)
        ad = auto[i].reshape(-1)[j]
        worst = max(worst, abs(ad - fd) / (max(abs(fd), floor) + 1e-12))
    return worst


__all__ = [
    "Tensor", "Tape", "Node", "ShapeError", "NonFiniteError", "OptState",
    "add", "sub", "mul", "div", "scale", "minimum", "matmul", "transpose", "reshape",
    "concat", "slice_", "sum_", "mean", "logsumexp", "tanh", "sigmoid", "exp", "log",
    "softplus", "square", "abs_smooth", "softmax", "log_softmax", "lgamma",
    "lgamma_value", "digamma_value", "adam_step", "one_cycle_lr", "grad_check",
]
