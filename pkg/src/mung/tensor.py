"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' adjoints. ``Tensor.backward`` builds a
:class:`Tape` (reverse topological order of the graph reachable from the
loss) and replays it once.

Broadcasting is deliberately absent: elementwise ops demand equal shapes and
the only implicit broadcast is a Python scalar. Where a row vector has to be
spread over a matrix (biases, layer-norm affine terms) the explicit
:func:`broadcast_to` op carries its own adjoint.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericalError",
    "Tensor",
    "Tape",
    "no_grad",
    "tensor",
    "add",
    "sub",
    "hadamard",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "relu",
    "gelu",
    "tanh",
    "square",
    "clamp",
    "matmul",
    "broadcast_to",
    "bias_add",
    "reshape",
    "transpose",
    "narrow",
    "concat",
    "take_rows",
    "sum",
    "mean",
    "masked_fill",
    "softmax",
    "layernorm",
    "cross_entropy_logits",
    "GradCheckReport",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(FloatingPointError):
    """An operation produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> "Tape":
        """Populate ``.grad`` of every grad-requiring tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        tape = Tape.record(self)
        if not tape.nodes:
            raise ValueError("backward called on a tensor with no recorded graph")
        tape.replay(np.ones_like(self.data))
        return tape

    # operator sugar
    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class Tape:
    """Reverse-topological record of the graph feeding one output.

    Built from the output by depth-first search; since every node appears
    after all of its consumers, a single pass visits each node exactly once.
    """

    nodes: list[Tensor] = field(default_factory=list)
    output: Tensor | None = None

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return cls(nodes=[n for n in order if n.requires_grad], output=output)

    def replay(self, seed_grad: np.ndarray) -> None:
        # interior nodes get fresh grads; leaves accumulate
        for n in self.nodes:
            if n._backward is not None:
                n.grad = None
        self.output.grad = seed_grad.copy() if self.output.grad is None else self.output.grad + seed_grad
        for n in self.nodes:
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)

    def clear(self) -> None:
        """Drop graph references; leaf parameters and their values stay untouched."""
        for n in self.nodes:
            if n._backward is not None:
                n._parents = ()
                n._backward = None
                n.grad = None
        self.nodes = []
        self.output = None


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced a non-finite value")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check(data, op)
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: _acc(a, g * c), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: _acc(a, g), "add_scalar")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * out), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: _acc(a, g / a.data), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: _acc(a, g * mask), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _acc(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner))

    return _make(out, (a,), bw, "gelu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _acc(a, g * (1.0 - out**2)), "tanh")


def square(a: Tensor) -> Tensor:
    return _make(a.data**2, (a,), lambda g: _acc(a, 2.0 * g * a.data), "square")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is passed only where the input lies strictly inside."""
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: _acc(a, g * inside), "clamp")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either a plain matrix shared
    across the batch, or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need matrices, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _acc(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *b.shape).sum(axis=0)
            _acc(b, gb)

    return _make(out, (a, b), bw, "matmul")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly expand ``a`` to ``shape`` (numpy rules); adjoint sums back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot expand {list(a.shape)} to {list(shape)}") from exc
    lead = len(shape) - a.ndim
    src = a.shape

    def bw(g):
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
        )
        _acc(a, g.sum(axis=axes).reshape(src) if axes else g)

    return _make(out, (a,), bw, "broadcast_to")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a vector over the last axis of ``x``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias_add: bias {list(b.shape)} does not match {list(x.shape)}")
    return add(x, broadcast_to(b, x.shape))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {list(src)} as {list(shape)}") from exc
    return _make(out, (a,), lambda g: _acc(a, g.reshape(src)), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: _acc(a, np.transpose(g, inv)), "transpose")


def narrow(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    """Slice ``lo:hi`` along ``axis``."""
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(lo, hi)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(a, full)

    return _make(a.data[idx].copy(), (a,), bw, "narrow")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shape mismatch {list(tensors[0].shape)} vs {list(t.shape)} on axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return _make(out, tensors, bw, "concat")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("take_rows needs integer ids")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].reshape(-1)[0]
        raise IndexError(f"id {int(bad)} out of range for table with {n} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _acc(table, full)

    return _make(table.data[ids], (table,), bw, "take_rows")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, src))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` (a constant, broadcastable to ``a``) is true."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)
    return _make(out, (a,), lambda g: _acc(a, np.where(mask, 0.0, g)), "masked_fill")


# ---------------------------------------------------------------- fused kernels


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layernorm needs a last axis of length >= 2")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: affine shapes {list(gain.shape)}/{list(bias.shape)} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _acc(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _acc(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            _acc(
                x,
                inv
                * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)),
            )

    return _make(out, (x, gain, bias), bw, "layernorm")


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Per-position negative log-likelihood (nats) of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {list(targets.shape)} vs logits {list(logits.shape)}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range for vocabulary of size {V}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        _acc(logits, g[..., None] * (p - onehot))

    return _make(-picked, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    passed: bool
    tol: float
    worst: tuple[str, tuple[int, ...]] | None = None
    per_input: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "max_rel_error": float(self.max_rel_error),
            "max_abs_error": float(self.max_abs_error),
            "n_coords": int(self.n_coords),
            "passed": bool(self.passed),
            "tol": float(self.tol),
            "worst": None if self.worst is None else [self.worst[0], [int(i) for i in self.worst[1]]],
            "per_input": {k: float(v) for k, v in self.per_input.items()},
        }


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-4,
    tol: float = 1e-3,
    floor: float = 1e-6,
    max_coords: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``inputs`` are perturbed in place (and restored). Tensors with
    ``requires_grad=False`` are still probed; their analytic gradient is taken
    as exactly zero, so a frozen tensor that actually influences ``f`` fails.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst_rel, worst_abs, worst, n = 0.0, 0.0, None, 0
    per_input: dict[str, float] = {}
    with no_grad():
        for k, (t, a) in enumerate(zip(inputs, analytic)):
            label = t.name or f"input{k}"
            flat = t.data.reshape(-1)
            coords = range(flat.size) if max_coords is None else range(min(flat.size, max_coords))
            local = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ai = a.reshape(-1)[i]
                err = abs(ai - num)
                rel = err / max(abs(ai), abs(num), floor)
                n += 1
                local = max(local, rel)
                worst_abs = max(worst_abs, err)
                if rel > worst_rel:
                    worst_rel = rel
                    worst = (label, np.unravel_index(i, t.shape))
            per_input[label] = local
    for t in inputs:
        t.grad = None
    return GradCheckReport(
        max_rel_error=worst_rel,
        max_abs_error=worst_abs,
        n_coords=n,
        passed=worst_rel < tol,
        tol=tol,
        worst=None if worst is None else (worst[0], tuple(int(v) for v in worst[1])),
        per_input=per_input,
    )
