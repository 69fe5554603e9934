"""Minimal reverse-mode autodiff over numpy float64 arrays.

Every differentiable op used by the model lives here. Ops record a node on
the active :class:`Tape` whenever one of their inputs requires a gradient;
:func:`backward` walks the tape in reverse and accumulates gradients.

Broadcasting is deliberately not supported apart from scalars. Shape changes
go through explicit ops (``reshape``, ``transpose``, ``bias_add``).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared."""


class DegenerateRowError(ValueError):
    """A softmax row had every entry masked out."""


class UnsupportedKernelError(ValueError):
    """Convolution kernel extent is even."""


# Eager NaN/Inf detection after each op.
DEBUG = True


def set_debug(flag: bool) -> None:
    global DEBUG
    DEBUG = bool(flag)


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; all go through the checked ops below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of op nodes; creation order is a topological order."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Activate ``tape`` (or a fresh one) for ops executed in the block."""
    tape = Tape() if tape is None else tape
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    if DEBUG and not np.isfinite(out_data).all():
        raise NumericError(f"{op}: non-finite output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].record(Node(op, inputs, out, bw))
    return out


def _require_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: dims {a.dims} vs {b.dims}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Only scalar broadcasting exists, so reduction is all-or-nothing.
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------- pointwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same("mul", a, b)
    ad, bd = a.data, b.data
    return _finish(
        "mul", ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b))
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _finish(
        "div", out, (a, b), lambda g: (_reduce_to(g / bd, a), _reduce_to(-g * out / bd, b))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _finish("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NumericError("log: non-positive argument")
    return _finish("log", np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _finish("square", x * x, (a,), lambda g: (2.0 * g * x,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    return _finish("relu", np.where(pos, x, 0.0), (a,), lambda g: (g * pos,))


def prelu(a: Tensor, alpha: Tensor) -> Tensor:
    """Parametric ReLU with a scalar learnable slope."""
    if alpha.data.size != 1:
        raise ShapeError(f"prelu: slope must be scalar, got dims {alpha.dims}")
    x = a.data
    al = float(alpha.data.reshape(()))
    pos = x > 0
    out = np.where(pos, x, al * x)

    def bw(g):
        ga = np.asarray((g * np.where(pos, 0.0, x)).sum()).reshape(alpha.shape)
        return (g * np.where(pos, 1.0, al), ga)

    return _finish("prelu", out, (a, alpha), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _finish("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def pointwise(op_kind: str, *args, alpha: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name (sigmoid, tanh, exp, relu, prelu, add, mul, sub, scale)."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "relu": relu}
    if op_kind in unary:
        return unary[op_kind](*args)
    if op_kind == "prelu":
        slope = args[1] if len(args) > 1 else Tensor(0.25 if alpha is None else alpha)
        return prelu(args[0], _as_tensor(slope))
    if op_kind == "add":
        return add(*args)
    if op_kind == "sub":
        return sub(*args)
    if op_kind == "mul":
        return mul(*args)
    if op_kind == "scale":
        return scale(args[0], args[1])
    raise ValueError(f"unknown pointwise op {op_kind!r}")


# ------------------------------------------------------------ reductions, shape


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _finish("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, dims: Sequence[int]) -> Tensor:
    shape = a.shape
    out = a.data.reshape(tuple(dims))
    if out.size != a.data.size:
        raise ShapeError(f"reshape: {a.dims} -> {list(dims)}")
    return _finish("reshape", out, (a,), lambda g: (g.reshape(shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _finish("transpose", out, (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, key) -> Tensor:
    """Basic slicing; gradient scatters back into the sliced region."""
    shape = a.shape
    out = np.array(a.data[key])

    def bw(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _finish("index", out, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _finish("concat", out, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def bias_add(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a vector along one axis; the explicit stand-in for broadcasting."""
    axis = axis % a.data.ndim
    if b.data.ndim != 1 or b.shape[0] != a.shape[axis]:
        raise ShapeError(f"bias_add: bias dims {b.dims} vs axis {axis} of {a.dims}")
    view = [1] * a.data.ndim
    view[axis] = -1
    others = tuple(i for i in range(a.data.ndim) if i != axis)
    return _finish(
        "bias_add",
        a.data + b.data.reshape(view),
        (a, b),
        lambda g: (g, g.sum(axis=others)),
    )


def constant_mul(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a non-differentiable same-shape array."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"constant_mul: dims {a.dims} vs {list(c.shape)}")
    return _finish("constant_mul", a.data * c, (a,), lambda g: (g * c,))


def constant_add(a: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"constant_add: dims {a.dims} vs {list(c.shape)}")
    return _finish("constant_add", a.data + c, (a,), lambda g: (g,))


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must match exactly, or ``b`` may be a plain 2-D matrix shared
    across every leading index (the weight-times-activations case).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: dims {a.dims} x {b.dims}")
    shared = bd.ndim == 2 and ad.ndim > 2
    if not shared and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: dims {a.dims} x {b.dims}")
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return (ga, gb)

    return _finish("matmul", out, (a, b), bw)


def softmax_masked(scores: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked (0) entries get probability exactly 0."""
    x = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[x.ndim - mask.ndim :]:
            raise ShapeError(f"softmax_masked: mask dims {list(mask.shape)} vs {scores.dims}")
        mask = np.broadcast_to(mask, x.shape)
        dead = ~mask.any(axis=-1)
        if dead.any():
            row = tuple(int(i) for i in np.argwhere(dead)[0])
            raise DegenerateRowError(f"softmax_masked: row {row} fully masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", out, (scores,), bw)


def row_normalize(a: Tensor) -> Tensor:
    """Divide each last-axis row by its sum (rows must have positive sums)."""
    x = a.data
    s = x.sum(axis=-1, keepdims=True)
    if (s <= 0).any():
        raise NumericError("row_normalize: non-positive row sum")
    out = x / s

    def bw(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) / s,)

    return _finish("row_normalize", out, (a,), bw)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, pad)


def conv2d_same(inp: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded same-size 2-D cross-correlation.

    ``inp`` is ``[c_in, h, w]`` or batched ``[b, c_in, h, w]``; ``kernel`` is
    ``[c_out, c_in, kh, kw]`` with odd ``kh`` and ``kw``.
    """
    x, k = inp.data, kernel.data
    if k.ndim != 4:
        raise ShapeError(f"conv2d_same: kernel dims {kernel.dims}")
    c_out, c_in, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedKernelError(f"conv2d_same: kernel extent {kh}x{kw} must be odd")
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    if xb.ndim != 4 or xb.shape[1] != c_in:
        raise ShapeError(f"conv2d_same: input dims {inp.dims} vs kernel {kernel.dims}")
    b, _, h, w = xb.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad_hw(xb, ph, pw)
    out = np.zeros((b, c_out, h, w))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di : di + h, dj : dj + w]
            out += np.einsum("oc,bchw->bohw", k[:, :, di, dj], patch, optimize=False)

    def bw(g):
        gb = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, :, di : di + h, dj : dj + w]
                gk[:, :, di, dj] = np.einsum("bohw,bchw->oc", gb, patch, optimize=False)
                gxp[:, :, di : di + h, dj : dj + w] += np.einsum(
                    "oc,bohw->bchw", k[:, :, di, dj], gb, optimize=False
                )
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return (gx[0] if squeeze else gx, gk)

    return _finish("conv2d", out[0] if squeeze else out, (inp, kernel), bw)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Reverse-accumulate dloss/dx over ``tape``.

    Gradients are accumulated into ``.grad`` of every leaf that requires one
    and returned keyed by tensor name (unnamed leaves are keyed ``id:<n>``).
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got dims {loss.dims}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        if len(in_grads) != len(node.inputs):
            raise RuntimeError(f"backward: {node.op} returned {len(in_grads)} grads")
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(t.shape)
            if key not in produced:
                leaves[key] = t
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    out: dict[str, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        out[t.name if t.name is not None else f"id:{key}"] = g
    return out


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error of the tape gradient of scalar ``f`` against central differences.

    ``indices`` restricts the comparison to chosen elements of ``x``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True, name="x")
    with recording() as tape:
        y = f(leaf)
    analytic = backward(y, tape).get("x", np.zeros_like(base))
    if y.data.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar")

    def evaluate(arr: np.ndarray) -> float:
        val = float(np.asarray(f(Tensor(arr)).data).reshape(()))
        if not np.isfinite(val):
            raise NumericError("finite_diff_check: non-finite evaluation")
        return val

    if indices is None:
        indices = list(np.ndindex(base.shape))
    worst = 0.0
    for idx in indices:
        plus, minus = base.copy(), base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
        g = float(analytic[idx])
        err = abs(g - numeric) / max(abs(g), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
