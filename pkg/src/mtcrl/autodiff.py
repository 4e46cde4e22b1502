"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation creates a :class:`Node` holding references to
its inputs and a local backward rule.  :func:`backward` orders the ancestry of
a scalar loss topologically (the :class:`Tape`) and runs the rules in reverse,
accumulating into ``.grad`` of every tensor that requires gradients.

Broadcasting is deliberately narrow: operands must have the same shape, or one
of them must be a scalar (python number or single-element tensor).  Row-wise
bias addition only exists inside the fused :func:`linear` op.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "Tape", "ShapeError", "DomainError", "ContractError",
    "no_grad", "set_debug", "tensor", "matmul", "linear", "add", "sub", "mul",
    "neg", "square", "tanh", "relu", "softplus", "exp", "log", "sigmoid",
    "sum", "mean", "concat", "columns", "rows", "reshape", "minimum", "layer_norm", "lstm_cell",
    "backward", "AdamState", "adam_apply",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf (slow; meant for tests and fault hunts)."""
    _state.debug = bool(flag)


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _node: "Node | None" = None, _check: bool = True):
        arr = np.asarray(values, dtype=np.float64)
        if _check:
            if any(d <= 0 for d in arr.shape):
                raise ShapeError(f"dimensions must be positive, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DomainError("tensor values must be finite")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node = _node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


@dataclass(eq=False)
class Node:
    """One recorded op: inputs, outputs and the rule mapping output grads to input grads."""

    inputs: tuple
    backward_rule: Callable
    op: str
    outputs: list = field(default_factory=list)
    # which inputs wanted gradients when the op ran; later flag changes do not reroute
    needs: tuple = ()


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a loss (inputs precede users)."""

    nodes: list

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if loss.node is None:
            return cls(order)
        # iterative post-order DFS; deterministic because inputs are ordered
        stack: list[tuple[Node, bool]] = [(loss.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if isinstance(inp, Tensor) and inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp.node, False))
        return cls(order)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, _check=False)


def _needs_grad(*xs) -> bool:
    return _grad_enabled() and any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _grad_flags(inputs: tuple) -> tuple:
    return tuple(isinstance(x, Tensor) and x.requires_grad for x in inputs)


def _make(values: np.ndarray, inputs: tuple, rule: Callable, op: str) -> Tensor:
    if _debug() and not np.all(np.isfinite(values)):
        raise DomainError(f"non-finite output from {op}")
    if _needs_grad(*inputs):
        node = Node(inputs, rule, op, needs=_grad_flags(inputs))
        out = Tensor(values, requires_grad=True, _node=node, _check=False)
        node.outputs.append(out)
        return out
    return Tensor(values, _check=False)


def _make_multi(values: Sequence[np.ndarray], inputs: tuple, rule: Callable, op: str) -> list[Tensor]:
    if _debug() and not all(np.all(np.isfinite(v)) for v in values):
        raise DomainError(f"non-finite output from {op}")
    if _needs_grad(*inputs):
        node = Node(inputs, rule, op, needs=_grad_flags(inputs))
        outs = [Tensor(v, requires_grad=True, _node=node, _check=False) for v in values]
        node.outputs.extend(outs)
        return outs
    return [Tensor(v, _check=False) for v in values]


def _is_scalar(t: Tensor) -> bool:
    return t.values.size == 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


# --- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), rule, "matmul")


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with b broadcast along rows."""
    x = _as_tensor(x)
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply {w.shape} to {x.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
        out += b.values

        def rule(g):
            return g @ wv.T, xv.T @ g, g.sum(axis=0)

        return _make(out, (x, w, b), rule, "linear")

    def rule_nb(g):
        return g @ wv.T, xv.T @ g

    return _make(out, (x, w), rule_nb, "linear")


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.values + b.values, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _make(a.values - b.values, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.values, b.values

    def rule(g):
        return _unbroadcast(g * bv, a), _unbroadcast(g * av, b)

    return _make(av * bv, (a, b), rule, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.values)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.values)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0
    return _make(np.maximum(a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    y = np.logaddexp(0.0, av)
    return _make(y, (a,), lambda g: (g * _sigmoid(av),), "softplus")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.values)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    if np.any(av <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.values <= b.values

    def rule(g):
        return g * pick_a, g * ~pick_a

    return _make(np.where(pick_a, a.values, b.values), (a, b), rule, "minimum")


def _sigmoid(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    # 1/(1+e^-x) == (1 + tanh(x/2)) / 2, which never overflows
    y = np.multiply(x, 0.5, out=out)
    np.tanh(y, out=y)
    y *= 0.5
    y += 0.5
    return y


# --- reductions and shape ops ---------------------------------------------

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")
    axis = axis % a.values.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.values.sum(axis=axis), (a,), rule, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ndim = parts[0].values.ndim
    axis = axis % ndim
    for p in parts[1:]:
        if p.values.ndim != ndim or any(
            p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError("concat: incompatible shapes " + str([q.shape for q in parts]))
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def rule(g):
        idx = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), rule, "concat")


def columns(a, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    a = _as_tensor(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"columns: bad slice {start}:{stop} of width {a.shape[-1]}")
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.values[..., start:stop], (a,), rule, "columns")


def rows(a, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the first axis."""
    a = _as_tensor(a)
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"rows: bad slice {start}:{stop} of length {a.shape[0]}")
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.values[start:stop], (a,), rule, "rows")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# --- fused layers ---------------------------------------------------------

def layer_norm(x, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    x = _as_tensor(x)
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError("layer_norm: gain/shift must match the feature width")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.values

    def rule(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gv + shift.values, (x, gain, shift), rule, "layer_norm")


_GATE_SCALES: dict[int, np.ndarray] = {}


def _gate_scale(hid: int) -> np.ndarray:
    if hid not in _GATE_SCALES:
        scale = np.full(4 * hid, 0.5)
        scale[2 * hid:3 * hid] = 1.0
        _GATE_SCALES[hid] = scale
    return _GATE_SCALES[hid]


def lstm_cell(x, h, c, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One gated recurrent step.

    ``weight`` has shape (in + hidden, 4 * hidden) with gate blocks ordered
    input, forget, candidate, output.  Returns ``(h_next, c_next)``.
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    hid = h.shape[1]
    if weight.shape != (x.shape[1] + hid, 4 * hid) or bias.shape != (4 * hid,):
        raise ShapeError(
            f"lstm_cell: weight {weight.shape} incompatible with input width {x.shape[1]} "
            f"and hidden width {hid}"
        )
    if c.shape != h.shape or x.shape[0] != h.shape[0]:
        raise ShapeError("lstm_cell: batch/hidden mismatch between x, h and c")
    xh = np.concatenate([x.values, h.values], axis=1)
    acts = xh @ weight.values
    acts += bias.values
    # one tanh pass: sigmoid gates are evaluated as (1 + tanh(x/2)) / 2
    acts *= _gate_scale(hid)
    np.tanh(acts, out=acts)
    sig = np.s_[:, :2 * hid], np.s_[:, 3 * hid:]
    for cols in sig:
        acts[cols] *= 0.5
        acts[cols] += 0.5
    i, f = acts[:, :hid], acts[:, hid:2 * hid]
    gc, o = acts[:, 2 * hid:3 * hid], acts[:, 3 * hid:]
    c_prev = c.values
    c_next = f * c_prev
    c_next += i * gc
    tc = np.tanh(c_next)
    h_next = o * tc
    wv = weight.values
    nin = x.shape[1]

    def rule(gh, gcn):
        dgates = np.empty_like(acts)
        dc = np.zeros_like(c_next) if gcn is None else gcn.copy()
        if gh is not None:
            dc += gh * o * (1.0 - tc * tc)
            np.multiply(gh, tc * o * (1.0 - o), out=dgates[:, 3 * hid:])
        else:
            dgates[:, 3 * hid:] = 0.0
        np.multiply(dc, gc * i * (1.0 - i), out=dgates[:, :hid])
        np.multiply(dc, c_prev * f * (1.0 - f), out=dgates[:, hid:2 * hid])
        np.multiply(dc, i * (1.0 - gc * gc), out=dgates[:, 2 * hid:3 * hid])
        dxh = dgates @ wv.T
        dc *= f
        return dxh[:, :nin], dxh[:, nin:], dc, xh.T @ dgates, dgates.sum(axis=0)

    h_out, c_out = _make_multi([h_next, c_next], (x, h, c, weight, bias), rule, "lstm_cell")
    return h_out, c_out


# --- backward -------------------------------------------------------------

def backward(loss: Tensor, grad: float = 1.0) -> Tape:
    """Populate ``.grad`` on every requires-grad ancestor of a scalar ``loss``.

    Gradients accumulate across calls until zeroed.  Returns the tape that
    was traversed.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(grad))}
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, grads[id(loss)])
        return tape
    for node in reversed(tape.nodes):
        out_grads = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in out_grads):
            continue
        for o, g in zip(node.outputs, out_grads):
            if g is not None:
                _accumulate(o, g)
        in_grads = node.backward_rule(*out_grads)
        for inp, wanted, g in zip(node.inputs, node.needs, in_grads):
            if not wanted or g is None:
                continue
            if inp.node is None:
                _accumulate(inp, g)
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = g if prev is None else prev + g
    return tape


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# --- optimizer ----------------------------------------------------------

class AdamState:
    """Adam moments for a fixed, ordered list of parameters."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.step = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_apply(state: AdamState, grad_clip: float | None = None) -> None:
    """One bias-corrected Adam step on ``state.params`` using their ``.grad``; clears grads.

    A parameter whose grad is missing raises :class:`ContractError`.
    """
    for p in state.params:
        if p.grad is None:
            raise ContractError(f"adam_apply: parameter {p.name or p.shape} has no gradient")
    grads = [p.grad for p in state.params]
    if grad_clip is not None:
        norm = float(np.sqrt(np_sum_sq(grads)))
        if norm > grad_clip:
            grads = [g * (grad_clip / norm) for g in grads]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def np_sum_sq(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sum([np.vdot(a, a) for a in arrays]))
