"""Configurable pre-norm decoder: H_{i+1} = H_i + F_i(H_i), with every ablated variant.

Also holds the closed-form parameter count, the FFN-width parity search and
the binary checkpoint format (magic ``SNKM``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as Lyr
from . import tensor as T
from .instrument import ActivationTrace, TraceRecorder
from .tensor import Tensor

NORM_VARIANTS = ("rmsnorm", "preaffine", "gatednorm", "dyt", "gateddyt")
GATED_NORMS = ("gatednorm", "gateddyt")

CHECKPOINT_MAGIC = b"SNKM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    vocab_size: int = 257
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 32
    ffn_dim: int = 344
    norm_variant: str = "rmsnorm"
    attn_gated: bool = False
    ffn_activation: str = "swish"
    residual_clip: Optional[float] = None
    gate_rank: int = 16
    gate_granularity: str = "elementwise"
    gate_activation: str = "sigmoid"
    tie_embeddings: bool = True
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    dyt_alpha: float = 0.5
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "vocab_size", "n_heads", "n_kv_heads", "head_dim", "ffn_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.norm_variant not in NORM_VARIANTS:
            raise ConfigError(f"norm_variant must be one of {NORM_VARIANTS}, got {self.norm_variant!r}")
        if self.ffn_activation not in Lyr.FFN_ACTIVATIONS:
            raise ConfigError(f"ffn_activation must be one of {Lyr.FFN_ACTIVATIONS}")
        if self.gate_granularity not in Lyr.GATE_GRANULARITIES:
            raise ConfigError(f"gate_granularity must be one of {Lyr.GATE_GRANULARITIES}")
        if self.gate_activation not in Lyr.GATE_ACTIVATIONS:
            raise ConfigError(f"gate_activation must be one of {Lyr.GATE_ACTIVATIONS}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even")
        if self.residual_clip is not None and not self.residual_clip > 0:
            raise ConfigError("residual_clip must be positive when set")
        if self.uses_gates:
            if not isinstance(self.gate_rank, int) or self.gate_rank <= 0:
                raise ConfigError(f"{self.norm_variant}/attn_gated needs a positive gate_rank")
            if self.gate_rank * 8 > self.d_model:
                raise ConfigError(f"gate_rank {self.gate_rank} exceeds d_model/8")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be >= 0")
        if not self.dyt_alpha > 0:
            raise ConfigError("dyt_alpha must be positive")
        return self

    @property
    def uses_gates(self) -> bool:
        return self.attn_gated or self.norm_variant in GATED_NORMS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**d).validate()

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# structure


@dataclass
class NormLayer:
    """One normalization instance of the configured variant."""

    variant: str
    d: int
    eps: float
    lam: Optional[Tensor] = None  # RMSNorm affine λ
    lambda1: Optional[Tensor] = None  # PreAffine λ₁
    dyt: Optional[Lyr.DyTParams] = None
    gate: Optional[Lyr.GateParams] = None

    def __call__(self, x: Tensor) -> Tensor:
        v = self.variant
        if v == "rmsnorm":
            return Lyr.rmsnorm(x, Lyr.RMSNormParams(self.lam, self.eps))
        if v == "preaffine":
            return Lyr.pre_affine_rmsnorm(x, Lyr.PreAffineParams(self.lambda1, Lyr.RMSNormParams(self.lam, self.eps)))
        if v == "gatednorm":
            return Lyr.gated_norm(x, Lyr.RMSNormParams(self.lam, self.eps), self.gate)
        if v == "dyt":
            return Lyr.dyt(x, self.dyt)
        return Lyr.gated_dyt(x, self.dyt, self.gate)

    def affine_weight(self) -> Tensor:
        return self.dyt.gamma if self.dyt is not None else self.lam

    def named_parameters(self, prefix: str):
        if self.lambda1 is not None:
            yield f"{prefix}.lambda1", self.lambda1
        if self.lam is not None:
            yield f"{prefix}.lam", self.lam
        if self.dyt is not None:
            yield f"{prefix}.alpha", self.dyt.alpha
            yield f"{prefix}.gamma", self.dyt.gamma
            yield f"{prefix}.beta", self.dyt.beta
        if self.gate is not None:
            yield f"{prefix}.gate.w_down", self.gate.w_down
            yield f"{prefix}.gate.w_up", self.gate.w_up


@dataclass
class Block:
    attn_norm: NormLayer
    attn: Lyr.AttentionParams
    ffn_norm: NormLayer
    ffn: Lyr.FFNParams

    def named_parameters(self, prefix: str):
        yield from self.attn_norm.named_parameters(f"{prefix}.attn_norm")
        a = self.attn
        for n in ("w_q", "w_k", "w_v", "w_o"):
            yield f"{prefix}.attn.{n}", getattr(a, n)
        if a.gate is not None:
            yield f"{prefix}.attn.gate.w_down", a.gate.w_down
            yield f"{prefix}.attn.gate.w_up", a.gate.w_up
        yield from self.ffn_norm.named_parameters(f"{prefix}.ffn_norm")
        for n in ("w_up", "w_gate", "w_down"):
            yield f"{prefix}.ffn.{n}", getattr(self.ffn, n)


@dataclass
class Model:
    cfg: ModelConfig
    embedding: Tensor
    blocks: list[Block]
    final_norm: NormLayer
    head: Optional[Tensor] = None  # [d, V]; None when tied

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding)]
        for i, b in enumerate(self.blocks):
            out.extend(b.named_parameters(f"blocks.{i}"))
        out.extend(self.final_norm.named_parameters("final_norm"))
        if self.head is not None:
            out.append(("head", self.head))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def norm_layers(self) -> list[tuple[str, NormLayer]]:
        out = []
        for i, b in enumerate(self.blocks):
            out.append((f"blocks.{i}.attn_norm", b.attn_norm))
            out.append((f"blocks.{i}.ffn_norm", b.ffn_norm))
        out.append(("final_norm", self.final_norm))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(kind, shape) for every parameter tensor in declaration order."""
    d, r, f = cfg.d_model, cfg.gate_rank, cfg.ffn_dim
    qd, kvd = cfg.n_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim

    def norm():
        v = cfg.norm_variant
        s = []
        if v == "preaffine":
            s.append(("ones", (d,)))
        if v in ("rmsnorm", "preaffine", "gatednorm"):
            s.append(("ones", (d,)))
        if v in ("dyt", "gateddyt"):
            s += [("alpha", (1,)), ("ones", (d,)), ("zeros", (d,))]
        if v in GATED_NORMS:
            s += [("gate_down", (d, r)), ("zeros", (r, d))]
        return s

    shapes = [("linear", (cfg.vocab_size, d))]
    for _ in range(cfg.n_layers):
        shapes += norm()
        shapes += [("linear", (d, qd)), ("linear", (d, kvd)), ("linear", (d, kvd)), ("linear", (qd, d))]
        if cfg.attn_gated:
            shapes += [("gate_down", (d, r)), ("zeros", (r, qd))]
        shapes += norm()
        shapes += [("linear", (d, f)), ("linear", (d, f)), ("linear", (f, d))]
    shapes += norm()
    if not cfg.tie_embeddings:
        shapes.append(("linear", (d, cfg.vocab_size)))
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(np.float32)


def _init_arrays(cfg: ModelConfig) -> list[np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    arrays = []
    for kind, shape in _shapes(cfg):
        if kind == "linear" or kind == "gate_down":
            arrays.append(_trunc_normal(rng, shape, 0.02))
        elif kind == "ones":
            arrays.append(np.ones(shape, np.float32))
        elif kind == "zeros":
            arrays.append(np.zeros(shape, np.float32))
        else:
            arrays.append(np.full(shape, cfg.dyt_alpha, np.float32))
    return arrays


def _assemble(cfg: ModelConfig, arrays: list[np.ndarray]) -> Model:
    it = iter(arrays)

    def nxt():
        return Tensor(next(it), requires_grad=True)

    def norm():
        v, d = cfg.norm_variant, cfg.d_model
        layer = NormLayer(v, d, cfg.norm_eps)
        if v == "preaffine":
            layer.lambda1 = nxt()
        if v in ("rmsnorm", "preaffine", "gatednorm"):
            layer.lam = nxt()
        if v in ("dyt", "gateddyt"):
            layer.dyt = Lyr.DyTParams(nxt(), nxt(), nxt())
        if v in GATED_NORMS:
            layer.gate = Lyr.GateParams(nxt(), nxt(), cfg.gate_granularity, cfg.gate_activation)
        return layer

    embedding = nxt()
    blocks = []
    for _ in range(cfg.n_layers):
        an = norm()
        wq, wk, wv, wo = nxt(), nxt(), nxt(), nxt()
        gate = Lyr.GateParams(nxt(), nxt(), "elementwise", "sigmoid") if cfg.attn_gated else None
        attn = Lyr.AttentionParams(wq, wk, wv, wo, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, gate, cfg.rope_base)
        fn = norm()
        ffn = Lyr.FFNParams(nxt(), nxt(), nxt(), cfg.ffn_activation)
        blocks.append(Block(an, attn, fn, ffn))
    final = norm()
    head = None if cfg.tie_embeddings else nxt()
    return Model(cfg, embedding, blocks, final, head)


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic model from ``cfg.seed``: truncated-normal(0.02) linears, unit norm weights, zero gate up-projections."""
    cfg.validate()
    return _assemble(cfg, _init_arrays(cfg))


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    cfg.validate()
    d, r, f, V, D = cfg.d_model, cfg.gate_rank, cfg.ffn_dim, cfg.vocab_size, cfg.n_layers
    qd, kvd = cfg.n_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim
    per_norm = {
        "rmsnorm": d,
        "preaffine": 2 * d,
        "gatednorm": d + 2 * d * r,
        "dyt": 1 + 2 * d,
        "gateddyt": 1 + 2 * d + 2 * d * r,
    }[cfg.norm_variant]
    attn = 2 * d * qd + 2 * d * kvd + (d * r + r * qd if cfg.attn_gated else 0)
    block = attn + 3 * d * f + 2 * per_norm
    return V * d * (1 if cfg.tie_embeddings else 2) + D * block + per_norm


def ffn_unit(cfg: ModelConfig) -> int:
    """Parameters added per unit of FFN width."""
    return 3 * cfg.d_model * cfg.n_layers


def adjust_ffn_for_parity(cfg: ModelConfig, target_params: int, min_ffn: int = 8) -> ModelConfig:
    """Copy of ``cfg`` whose ffn_dim brings the parameter count closest to ``target_params`` (ties: smaller f)."""
    unit = ffn_unit(cfg)
    base = param_count(dataclasses.replace(cfg, ffn_dim=1)) - unit
    exact = (target_params - base) / unit
    lo = int(np.floor(exact))
    best = None
    for f in (lo, lo + 1):
        if f < 1:
            continue
        gap = abs(base + unit * f - target_params)
        if best is None or gap < best[1]:
            best = (f, gap)
    if best is None or best[0] < min_ffn:
        raise ConfigError(f"target {target_params} unreachable with ffn_dim >= {min_ffn}")
    return dataclasses.replace(cfg, ffn_dim=best[0])


# --------------------------------------------------------------------------
# forward


def forward(model: Model, ids, trace: bool = False, hook=None, recorder=None):
    """Logits [B, L, V] and, with ``trace=True``, the :class:`ActivationTrace`.

    Residual clipping (when configured) follows every residual addition.
    ``recorder`` receives ``on_hidden`` / ``on_attention`` callbacks; ``hook``
    sees each quantizable projection input as ``hook("blocks.{i}.{site}", x)``.
    """
    cfg = model.cfg
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ValueError("ids must be [B, L] with L >= 1")
    recorders = [r for r in (recorder,) if r is not None]
    tracer = TraceRecorder() if trace else None
    if tracer is not None:
        recorders.append(tracer)
    want_attn = any(getattr(r, "wants_attention", True) for r in recorders)

    def clip(h):
        return T.clip_abs(h, cfg.residual_clip) if cfg.residual_clip is not None else h

    L = ids.shape[1]
    mask = Lyr.causal_mask(L)
    h = T.embed(model.embedding, ids)
    for r in recorders:
        r.on_hidden(0, h.data)
    for i, blk in enumerate(model.blocks):
        bh = None if hook is None else (lambda site, x, i=i: hook(f"blocks.{i}.{site}", x))
        res = Lyr.attention(blk.attn_norm(h), blk.attn, mask, bh, return_probs=want_attn)
        if want_attn:
            a, probs = res
            for r in recorders:
                r.on_attention(i, probs.data)
        else:
            a = res
        h = clip(T.add(h, a))
        h = clip(T.add(h, Lyr.glu_ffn(blk.ffn_norm(h), blk.ffn, bh)))
        for r in recorders:
            r.on_hidden(i + 1, h.data)
    out = model.final_norm(h)
    w_head = model.head if model.head is not None else T.swapaxes(model.embedding, 0, 1)
    logits = T.matmul(out, w_head)
    tr = None
    if tracer is not None:
        tr = tracer.trace(ids, {"config_hash": cfg.config_hash(), "seed": cfg.seed})
    return logits, tr


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: Model) -> bytes:
    blob = model.cfg.canonical_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a sinklab checkpoint (bad magic)")
    version, n = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig.from_dict(json.loads(raw[12 : 12 + n]))
    off = 12 + n
    arrays = []
    for _, shape in _shapes(cfg):
        k = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=k, offset=off).reshape(shape).astype(np.float32))
        off += 4 * k
    if off != len(raw):
        raise ValueError("checkpoint size does not match its config")
    return _assemble(cfg, arrays)
