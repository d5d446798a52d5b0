"""Fake quantization: FP8 E4M3 and FP4 E2M1 grids, block/per-token scaling, SmoothQuant.

Values are rounded to the nearest representable code (ties to the even
mantissa), then dequantized, so every tensor stays in float32 storage. Scales
are kept in float64; a block whose amax maps to the top code reconstructs it
exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

FORMATS = ("E4M3", "E2M1", "none")

# quantized projection groups per block; members share one input
LINEAR_GROUPS = {
    "attn_in": ("attn", ("w_q", "w_k", "w_v")),
    "attn_out": ("attn", ("w_o",)),
    "ffn_in": ("ffn", ("w_up", "w_gate")),
    "ffn_out": ("ffn", ("w_down",)),
}


@lru_cache(maxsize=None)
def format_grid(fmt: str) -> tuple[np.ndarray, np.ndarray]:
    """Non-negative representable magnitudes (ascending) and their mantissa LSBs."""
    if fmt == "E4M3":
        ebits, mbits, bias = 4, 3, 7
    elif fmt == "E2M1":
        ebits, mbits, bias = 2, 1, 1
    else:
        raise ValueError(f"unknown format {fmt!r}")
    vals, lsb = [], []
    for e in range(2**ebits):
        for m in range(2**mbits):
            if fmt == "E4M3" and e == 2**ebits - 1 and m == 2**mbits - 1:
                continue  # NaN encoding; the saturating variant tops out at 448
            if e == 0:
                v = (m / 2**mbits) * 2.0 ** (1 - bias)
            else:
                v = (1 + m / 2**mbits) * 2.0 ** (e - bias)
            vals.append(v)
            lsb.append(m & 1)
    order = np.argsort(vals, kind="stable")
    return np.asarray(vals)[order], np.asarray(lsb)[order]


def max_code(fmt: str) -> float:
    return float(format_grid(fmt)[0][-1])


def max_gap(fmt: str) -> float:
    return float(np.max(np.diff(format_grid(fmt)[0])))


def round_to_grid(x: np.ndarray, fmt: str) -> np.ndarray:
    """Nearest representable value of ``x`` (already divided by its scale), saturating."""
    grid, lsb = format_grid(fmt)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    a = np.minimum(np.abs(x), grid[-1])
    hi = np.clip(np.searchsorted(grid, a, side="left"), 1, len(grid) - 1)
    lo = hi - 1
    dlo, dhi = a - grid[lo], grid[hi] - a
    pick_hi = (dhi < dlo) | ((dhi == dlo) & (lsb[hi] == 0))
    q = np.where(pick_hi, grid[hi], grid[lo])
    return np.copysign(q, x)


def quantize_value(fmt: str, x: float, scale: float) -> float:
    if not scale > 0:
        raise ValueError("scale must be positive")
    if fmt == "none":
        return float(x)
    if not np.isfinite(x):
        raise ValueError("cannot quantize non-finite values")
    return float(scale * round_to_grid(np.asarray(x / scale), fmt))


def _quant_blocks(blocks: np.ndarray, fmt: str) -> np.ndarray:
    """Quantize along the last axis of ``blocks``, one amax scale per leading index."""
    b = np.asarray(blocks, dtype=np.float64)
    amax = np.max(np.abs(b), axis=-1, keepdims=True)
    top = max_code(fmt)
    scale = np.where(amax > 0, amax / top, 1.0)
    # (g / top) * amax maps the block max back onto amax exactly, so a second pass is a no-op
    return (round_to_grid(b / scale, fmt) / top) * amax


@dataclass
class QuantSpec:
    weight_format: str = "E4M3"
    act_format: str = "E4M3"
    weight_block: Optional[tuple[int, int]] = None  # (rows, cols) over the [out, in] view
    act_block: int = 16  # second-stage block inside a token row (E2M1 only)
    smoothing: bool = False
    alpha: float = 0.5
    label: Optional[str] = None

    def __post_init__(self):
        for f in (self.weight_format, self.act_format):
            if f not in FORMATS:
                raise ValueError(f"unknown quant format {f!r}")
        if self.weight_block is None:
            self.weight_block = (1, 16) if self.weight_format == "E2M1" else (128, 128)
        self.weight_block = tuple(int(v) for v in self.weight_block)
        if len(self.weight_block) != 2 or min(self.weight_block) < 1:
            raise ValueError("weight_block must be two positive ints")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        bits = {"E4M3": "8", "E2M1": "4", "none": "16"}
        s = f"W{bits[self.weight_format]}A{bits[self.act_format]}"
        return s + ("+SQ" if self.smoothing else "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_block"] = list(self.weight_block)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        known = {"weight_format", "act_format", "weight_block", "act_block", "smoothing", "alpha", "label"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown quant spec key(s): {', '.join(unknown)}")
        return cls(**d)


W8A8 = QuantSpec("E4M3", "E4M3")
W4A4 = QuantSpec("E2M1", "E2M1")


def fake_quant_matrix(W: np.ndarray, fmt: str, block: tuple[int, int]) -> np.ndarray:
    """Per-block amax scaling over a 2-D array; edges are zero-padded for scaling only."""
    if fmt == "none":
        return np.array(W, dtype=np.float32)
    W = np.asarray(W)
    R, C = W.shape
    br, bc = block
    Rp, Cp = -(-R // br) * br, -(-C // bc) * bc
    P = np.zeros((Rp, Cp), dtype=np.float64)
    P[:R, :C] = W.astype(np.float32)  # quantize the stored float32 values
    blocks = P.reshape(Rp // br, br, Cp // bc, bc).transpose(0, 2, 1, 3).reshape(Rp // br, Cp // bc, br * bc)
    q = _quant_blocks(blocks, fmt)
    q = q.reshape(Rp // br, Cp // bc, br, bc).transpose(0, 2, 1, 3).reshape(Rp, Cp)
    return q[:R, :C].astype(np.float32)


def fake_quant_weight(W, spec: QuantSpec) -> np.ndarray:
    """Fake-quantize a stored [in, out] weight; blocks are laid out over its [out, in] view."""
    arr = W.data if isinstance(W, Tensor) else np.asarray(W)
    return fake_quant_matrix(arr.T, spec.weight_format, spec.weight_block).T.copy()


def fake_quant_act_per_token(X, fmt: str, block: int = 16) -> np.ndarray:
    """Dynamic per-token fake quantization of [..., d] activations.

    E4M3 uses one amax scale per token row. E2M1 normalizes each row by its
    own amax (first stage) and then rescales every ``block``-wide group inside
    the row (second stage). With full-precision scales the row factor cancels,
    so each group is scaled by its own amax over the top code directly.
    """
    arr = np.asarray(X.data if isinstance(X, Tensor) else X)
    if fmt == "none":
        return arr.astype(np.float32)
    shape = arr.shape
    rows = arr.reshape(-1, shape[-1]).astype(np.float32).astype(np.float64)
    if fmt == "E4M3":
        return _quant_blocks(rows, fmt).reshape(shape).astype(np.float32)
    d = shape[-1]
    dp = -(-d // block) * block
    P = np.zeros((rows.shape[0], dp))
    P[:, :d] = rows
    q = _quant_blocks(P.reshape(rows.shape[0], dp // block, block), fmt).reshape(rows.shape[0], dp)
    return q[:, :d].reshape(shape).astype(np.float32)


# --------------------------------------------------------------------------
# SmoothQuant


@dataclass
class CalibStats:
    """Per input channel max |activation| and max |weight| for each quantized projection group."""

    act_amax: dict[str, np.ndarray] = field(default_factory=dict)
    weight_amax: dict[str, np.ndarray] = field(default_factory=dict)


def smooth_factors(act_amax, weight_amax, alpha: float = 0.5, floor: float = 1e-5) -> np.ndarray:
    """s_j = act_j^alpha / weight_j^(1 - alpha), floored."""
    if act_amax is None or weight_amax is None:
        raise ValueError("missing calibration statistics")
    a = np.maximum(np.asarray(act_amax, dtype=np.float64), floor)
    w = np.maximum(np.asarray(weight_amax, dtype=np.float64), floor)
    if a.shape != w.shape:
        raise T.DimensionError("activation and weight statistics differ in length")
    return np.maximum(a**alpha / w ** (1.0 - alpha), floor)


@dataclass
class SmoothedLinear:
    """Weight with rows scaled by ``s`` plus the matching input divisor."""

    weight: np.ndarray
    s: np.ndarray

    def scale_input(self, x: np.ndarray) -> np.ndarray:
        return x / self.s

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.scale_input(x) @ self.weight


def apply_smoothing(weight, s) -> SmoothedLinear:
    """X diag(1/s) · diag(s) W == X W; ``weight`` is [in, out]."""
    W = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != W.shape[0]:
        raise T.DimensionError(f"smoothing vector of length {s.shape} does not match weight {W.shape}")
    if not np.all(s > 0):
        raise ValueError("smoothing factors must be positive")
    return SmoothedLinear(W * s[:, None], s)


def _group_weights(model, site: str) -> list[Tensor]:
    _, rest = site.split(".", 1)
    i, group = rest.split(".")
    blk = model.blocks[int(i)]
    owner, names = LINEAR_GROUPS[group]
    obj = blk.attn if owner == "attn" else blk.ffn
    return [getattr(obj, n) for n in names]


def quant_sites(model) -> list[str]:
    return [f"blocks.{i}.{g}" for i in range(len(model.blocks)) for g in LINEAR_GROUPS]


def calibrate(model, batches) -> CalibStats:
    """Collect per-channel input amax at every quantized projection."""
    from .model import forward

    stats = CalibStats()

    def hook(site, x):
        a = np.abs(x.data).reshape(-1, x.shape[-1]).max(axis=0).astype(np.float64)
        prev = stats.act_amax.get(site)
        stats.act_amax[site] = a if prev is None else np.maximum(prev, a)
        return x

    for ids in batches:
        forward(model, ids, hook=hook)
    for site in quant_sites(model):
        ws = [w.data for w in _group_weights(model, site)]
        stats.weight_amax[site] = np.max(np.abs(np.concatenate(ws, axis=1)), axis=1).astype(np.float64)
    return stats


@dataclass
class QuantizedModel:
    """A weight-quantized copy of a model plus the activation hook for its projections."""

    model: object
    spec: QuantSpec
    smoothing: dict[str, np.ndarray] = field(default_factory=dict)

    def hook(self, site: str, x: Tensor) -> Tensor:
        a = x.data
        s = self.smoothing.get(site)
        if s is not None:
            a = a / s
        return Tensor(fake_quant_act_per_token(a, self.spec.act_format, self.spec.act_block))


def quantize_model(model, spec: QuantSpec, calib: Optional[CalibStats] = None) -> QuantizedModel:
    """Fake-quantize every attention/FFN projection weight (with optional smoothing folded in)."""
    if spec.smoothing and calib is None:
        raise ValueError("smoothing needs calibration statistics")
    qm = copy.deepcopy(model)
    smoothing = {}
    for site in quant_sites(qm):
        s = None
        if spec.smoothing:
            s = smooth_factors(calib.act_amax[site], calib.weight_amax[site], spec.alpha)
            smoothing[site] = s
        for w in _group_weights(qm, site):
            src = w.data if s is None else apply_smoothing(w.data, s).weight
            w.data = fake_quant_weight(src, spec)
            w.requires_grad = False
    return QuantizedModel(qm, spec, smoothing)


@dataclass
class QuantReport:
    spec: QuantSpec
    loss_ref: float
    loss_quant: float

    @property
    def delta(self) -> float:
        return self.loss_quant - self.loss_ref

    def to_dict(self) -> dict:
        return {
            "name": self.spec.name,
            "spec": self.spec.to_dict(),
            "loss_ref": self.loss_ref,
            "loss_quant": self.loss_quant,
            "delta": self.delta,
        }


def eval_quantized(model, spec: QuantSpec, batches, calib_batches=None) -> QuantReport:
    """Mean cross-entropy of the full-precision and fake-quantized model on the same batches.

    ``batches`` yields (ids, targets). Norms, gates, softmax and the residual
    stream stay in full precision.
    """
    from .model import forward

    batches = list(batches)
    calib = None
    if spec.smoothing:
        calib = calibrate(model, calib_batches if calib_batches is not None else [b[0] for b in batches])
    qm = quantize_model(model, spec, calib)

    def mean_loss(m, hook):
        tot = 0.0
        for ids, tgt in batches:
            logits, _ = forward(m, ids, hook=hook)
            tot += float(T.cross_entropy(logits, tgt).data)
        return tot / len(batches)

    ref = mean_loss(model, None)
    return QuantReport(spec, ref, mean_loss(qm.model, qm.hook))


def write_quant_report(path, reports: list[QuantReport], task: str = "eval") -> None:
    data = {"tasks": {task: [r.to_dict() for r in reports]}}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
