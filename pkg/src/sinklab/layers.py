"""Normalization, gating, feed-forward and attention variants.

Every layer is a plain function over :class:`~sinklab.tensor.Tensor` inputs and
a parameter record. Weight matrices are stored ``[in, out]`` so a projection
is ``x @ W``.

Projection sites accept an optional ``hook(site, x) -> x`` that sees the input
of each quantizable linear projection (used by calibration and fake quant).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

Hook = Callable[[str, Tensor], Tensor]

GATE_ACTIVATIONS = ("sigmoid", "tanh", "silu", "identity")
GATE_GRANULARITIES = ("elementwise", "tensorwise")
FFN_ACTIVATIONS = ("swish", "sigmoid")


@dataclass
class RMSNormParams:
    lam: Tensor
    eps: float = 1e-6


@dataclass
class PreAffineParams:
    lambda1: Tensor
    inner: RMSNormParams


@dataclass
class GateParams:
    w_down: Tensor  # [d, r]
    w_up: Tensor  # [r, d]
    granularity: str = "elementwise"
    activation: str = "sigmoid"

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]

    def __post_init__(self):
        d, r = self.w_down.shape
        if self.w_up.shape[0] != r:
            raise T.DimensionError("gate w_up rows must equal gate rank")
        if r * 8 > d:
            raise ValueError(f"gate rank {r} too large for width {d} (need r <= d/8)")
        if self.granularity not in GATE_GRANULARITIES:
            raise ValueError(f"unknown gate granularity {self.granularity!r}")
        if self.activation not in GATE_ACTIVATIONS:
            raise ValueError(f"unknown gate activation {self.activation!r}")


@dataclass
class DyTParams:
    alpha: Tensor  # shape (1,)
    gamma: Tensor
    beta: Tensor


@dataclass
class FFNParams:
    w_up: Tensor  # [d, f]
    w_gate: Tensor  # [d, f]
    w_down: Tensor  # [f, d]
    activation: str = "swish"

    def __post_init__(self):
        d, f = self.w_up.shape
        if self.w_gate.shape != (d, f) or self.w_down.shape != (f, d):
            raise T.DimensionError("inconsistent FFN weight shapes")
        if self.activation not in FFN_ACTIVATIONS:
            raise ValueError(f"unknown FFN activation {self.activation!r}")


@dataclass
class AttentionParams:
    w_q: Tensor  # [d, n_heads * head_dim]
    w_k: Tensor  # [d, n_kv_heads * head_dim]
    w_v: Tensor
    w_o: Tensor  # [n_heads * head_dim, d]
    n_heads: int
    n_kv_heads: int
    head_dim: int
    gate: Optional[GateParams] = None
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")


# --------------------------------------------------------------------------
# normalization


def rmsnorm(x: Tensor, p: RMSNormParams) -> Tensor:
    inv = T.rsqrt(T.reduce_mean_square(x), p.eps)
    return T.mul(T.mul(x, inv), p.lam)


def pre_affine_rmsnorm(x: Tensor, p: PreAffineParams) -> Tensor:
    return rmsnorm(T.mul(x, p.lambda1), p.inner)


def dyt(x: Tensor, p: DyTParams) -> Tensor:
    return T.add(T.mul(T.tanh(T.mul(x, p.alpha)), p.gamma), p.beta)


def gate_scores(y: Tensor, gate: GateParams) -> Tensor:
    """act(W_up(swish(W_down y))); tensorwise gates average the up-projection to one score per token."""
    z = T.matmul(T.swish(T.matmul(y, gate.w_down)), gate.w_up)
    if gate.granularity == "tensorwise":
        z = T.mean_lastaxis(z)
    return T.unary("swish" if gate.activation == "silu" else gate.activation, z)


def gated_norm(x: Tensor, norm: RMSNormParams, gate: GateParams) -> Tensor:
    y = rmsnorm(x, norm)
    return T.mul(y, gate_scores(y, gate))


def gated_dyt(x: Tensor, p: DyTParams, gate: GateParams) -> Tensor:
    y = dyt(x, p)
    return T.mul(y, gate_scores(y, gate))


# --------------------------------------------------------------------------
# feed-forward and attention


def _site(hook: Optional[Hook], name: str, x: Tensor) -> Tensor:
    return hook(name, x) if hook is not None else x


def glu_ffn(x: Tensor, p: FFNParams, hook: Optional[Hook] = None) -> Tensor:
    """W_down((W_up x) * act(W_gate x)); swish gives SwiGLU, sigmoid gives GLU."""
    xin = _site(hook, "ffn_in", x)
    up = T.matmul(xin, p.w_up)
    act = T.unary(p.activation, T.matmul(xin, p.w_gate))
    h = T.mul(up, act)
    return T.matmul(_site(hook, "ffn_out", h), p.w_down)


def rope_apply(q_or_k: Tensor, base: float = 10000.0) -> Tensor:
    return T.rope_apply(q_or_k, base)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _split_heads(x: Tensor, B: int, L: int, n: int, hd: int) -> Tensor:
    return T.swapaxes(T.reshape(x, (B, L, n, hd)), 1, 2)


def attention(
    x: Tensor,
    p: AttentionParams,
    mask: Optional[np.ndarray] = None,
    hook: Optional[Hook] = None,
    return_probs: bool = False,
):
    """Grouped-query causal self-attention with rotary positions.

    With ``p.gate`` set, the concatenated head outputs are multiplied by a
    sigmoid gate computed from ``x`` before the output projection. Returns
    the output, or ``(output, probs)`` with probs shaped [B, n_heads, L, L].
    """
    B, L, _ = x.shape
    nh, nkv, hd = p.n_heads, p.n_kv_heads, p.head_dim
    if mask is None:
        mask = causal_mask(L)
    xin = _site(hook, "attn_in", x)
    q = rope_apply(_split_heads(T.matmul(xin, p.w_q), B, L, nh, hd), p.rope_base)
    k = rope_apply(_split_heads(T.matmul(xin, p.w_k), B, L, nkv, hd), p.rope_base)
    v = _split_heads(T.matmul(xin, p.w_v), B, L, nkv, hd)
    k = T.repeat_axis(k, nh // nkv, axis=1)
    v = T.repeat_axis(v, nh // nkv, axis=1)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(hd))
    probs = T.softmax_lastaxis(scores, mask)
    o = T.reshape(T.swapaxes(T.matmul(probs, v), 1, 2), (B, L, nh * hd))
    if p.gate is not None:
        o = T.mul(o, gate_scores(x, p.gate))
    out = T.matmul(_site(hook, "attn_out", o), p.w_o)
    return (out, probs) if return_probs else out
