"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the transformer, the quantizer and the tests need are
provided. Gradients are recorded on an explicit :class:`Tape` that is active
inside a ``with`` block; ops evaluated with no active tape are not tracked.

Broadcasting is deliberately narrow: the second operand of ``add``/``mul``
may equal the first in shape, be a trailing-axis vector ``(d,)``, a keepdim
column ``(..., 1)`` or a single element.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "DimensionError",
    "DomainError",
    "precision",
    "default_dtype",
    "tensor",
    "matmul",
    "add",
    "mul",
    "elementwise",
    "scale",
    "unary",
    "sigmoid",
    "tanh",
    "swish",
    "rsqrt",
    "reduce_mean_square",
    "mean_lastaxis",
    "sum_all",
    "softmax_lastaxis",
    "clip_abs",
    "embed",
    "cross_entropy",
    "reshape",
    "swapaxes",
    "repeat_axis",
    "rope_apply",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of the operation."""


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the float dtype used for new tensors (64-bit for gradient checks)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            self.data = arr
        else:
            self.data = np.asarray(arr, dtype=default_dtype(), order="C")
        self.requires_grad = bool(requires_grad)
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops, in evaluation (topological) order."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(Node(op, inputs, out, bwd))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf on ``tape``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves[id(inp)] = inp
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = g.astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# --------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D and shared across the batch of ``a``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    shared = b.ndim == 2 and a.ndim > 2

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result("matmul", out, (a, b), bwd)


def _broadcast_kind(a_shape, b_shape) -> str:
    if a_shape == b_shape:
        return "same"
    if len(b_shape) <= 1 and int(np.prod(b_shape)) == 1:
        return "scalar"
    if len(a_shape) >= 1 and b_shape == (a_shape[-1],):
        return "vec"
    if len(a_shape) >= 1 and b_shape == tuple(a_shape[:-1]) + (1,):
        return "col"
    raise DimensionError(f"cannot broadcast {b_shape} over {a_shape}")


def _reduce_to(g: np.ndarray, kind: str, b_shape) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "vec":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    if kind == "col":
        return g.sum(axis=-1, keepdims=True)
    return np.asarray(g.sum()).reshape(b_shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return g, _reduce_to(g, kind, b.shape)

    return _result("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_to(g * a.data, kind, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", out, (a, b), bwd)


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (not differentiated)."""
    cc = np.asarray(c, dtype=x.data.dtype)
    return _result("scale", x.data * cc, (x,), lambda g: (g * cc,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow for large |x|
    half = np.asarray(0.5, dtype=x.dtype)
    return half * (np.tanh(half * x) + np.asarray(1, dtype=x.dtype))


def unary(kind: str, x: Tensor, eps: float = 0.0) -> Tensor:
    """Pointwise sigmoid, tanh, swish, rsqrt or identity."""
    d = x.data
    if kind == "sigmoid":
        s = _sigmoid_np(d)
        return _result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))
    if kind == "tanh":
        t = np.tanh(d)
        return _result("tanh", t, (x,), lambda g: (g * (1 - t * t),))
    if kind in ("swish", "silu"):
        s = _sigmoid_np(d)
        return _result("swish", d * s, (x,), lambda g: (g * (s + d * s * (1 - s)),))
    if kind == "rsqrt":
        if eps < 0:
            raise DomainError("rsqrt eps must be >= 0")
        shifted = d + np.asarray(eps, dtype=d.dtype)
        if not np.all(shifted > 0):
            raise DomainError("rsqrt of a non-positive value")
        r = 1.0 / np.sqrt(shifted)
        return _result("rsqrt", r, (x,), lambda g: (g * (-0.5) * r / shifted,))
    if kind == "identity":
        return _result("identity", d.copy(), (x,), lambda g: (g,))
    raise ValueError(f"unknown unary op {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return unary("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return unary("tanh", x)


def swish(x: Tensor) -> Tensor:
    return unary("swish", x)


def rsqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    return unary("rsqrt", x, eps)


def reduce_mean_square(x: Tensor) -> Tensor:
    """Mean of squares over the last axis, keepdim."""
    d = x.data
    n = d.shape[-1]
    out = np.mean(d * d, axis=-1, keepdims=True)
    return _result("mean_square", out, (x,), lambda g: (g * (2.0 / n) * d,))


def mean_lastaxis(x: Tensor) -> Tensor:
    n = x.shape[-1]
    out = np.mean(x.data, axis=-1, keepdims=True)
    return _result("mean", out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _result("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def softmax_lastaxis(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax; ``mask`` (True = keep) broadcasts against ``x``."""
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        if not np.all(mask.any(axis=-1)):
            raise DomainError("softmax row is fully masked")
        d = np.where(mask, d, -np.inf)
    m = np.max(d, axis=-1, keepdims=True)
    e = np.exp(d - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), bwd)


def clip_abs(x: Tensor, threshold: float) -> Tensor:
    """Symmetric clip to [-threshold, threshold]; gradient passes only inside the band."""
    if not threshold > 0:
        raise ValueError("clip threshold must be positive")
    d = x.data
    t = np.asarray(threshold, dtype=d.dtype) if np.isfinite(threshold) else np.inf
    out = np.clip(d, -t, t)
    inside = np.abs(d) <= t
    return _result("clip_abs", out, (x,), lambda g: (g * inside,))


def embed(table: Tensor, ids) -> Tensor:
    idx = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if idx.dtype.kind not in "iu":
        raise TypeError("token ids must be integers")
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embed", out, (table,), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token-level negative log-likelihood in nats."""
    tgt = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    V = logits.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    z = logits.data.reshape(-1, V)
    t = tgt.reshape(-1)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    n = t.shape[0]
    picked = z[np.arange(n), t]
    loss = np.asarray(np.mean(lse - picked), dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), t] -= 1
        return ((p * (g / n)).reshape(logits.shape).astype(logits.data.dtype),)

    return _result("cross_entropy", loss, (logits,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = np.ascontiguousarray(np.swapaxes(x.data, a1, a2))
    return _result("swapaxes", out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def repeat_axis(x: Tensor, repeats: int, axis: int) -> Tensor:
    """``np.repeat`` along ``axis`` (each slice repeated consecutively)."""
    if repeats == 1:
        return x
    out = np.repeat(x.data, repeats, axis=axis)
    ax = axis % x.ndim

    def bwd(g):
        shp = list(x.shape)
        shp.insert(ax + 1, repeats)
        return (g.reshape(shp).sum(axis=ax + 1),)

    return _result("repeat", out, (x,), bwd)


def rope_angles(length: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = np.arange(length, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def rope_apply(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotary embedding over adjacent pairs (2i, 2i+1) of the last axis; positions on axis -2."""
    L, hd = x.shape[-2], x.shape[-1]
    if hd % 2:
        raise DimensionError("rotary embedding needs an even head_dim")
    cos, sin = rope_angles(L, hd, base, x.data.dtype)

    def rotate(v, sgn):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ev * cos - sgn * od * sin
        out[..., 1::2] = sgn * ev * sin + od * cos
        return out

    return _result("rope", rotate(x.data, 1), (x,), lambda g: (rotate(g, -1),))


# --------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, floor: float = 1e-3) -> float:
    """Max relative error between the tape gradient of scalar ``f`` and central differences.

    Runs in float64. Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps near-zero gradients from dominating through roundoff.
    """
    with precision(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        xt = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            y = f(xt)
        backward(y, tape)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
        numeric = np.zeros_like(x0)
        flat = x0.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x0)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x0)).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
