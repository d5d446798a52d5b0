"""Outlier diagnostics over recorded activations.

Covers residual-stream dimension reordering, attention-sink scoring,
residual-sink and massive-activation detection, norm-weight deviation and the
norm-bound check relating an outlier dimension to the post-RMSNorm feature norm.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class ActivationTrace:
    """Residual-stream snapshots H_0..H_D and per-layer attention maps.

    ``hidden`` is [D+1, N, d] with N = B*L tokens; ``attn`` holds one
    [B, heads, L, L] array per softmax-attention layer.
    """

    hidden: np.ndarray
    attn: list[np.ndarray] = field(default_factory=list)
    ids: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return self.hidden.shape[0] - 1

    def save(self, path) -> None:
        arrays = {"hidden": self.hidden, "meta": np.array(json.dumps(self.meta, sort_keys=True))}
        if self.ids is not None:
            arrays["ids"] = self.ids
        for i, a in enumerate(self.attn):
            arrays[f"attn_{i:03d}"] = a
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "ActivationTrace":
        with np.load(path) as z:
            attn_keys = sorted(k for k in z.files if k.startswith("attn_"))
            return cls(
                hidden=z["hidden"],
                attn=[z[k] for k in attn_keys],
                ids=z["ids"] if "ids" in z.files else None,
                meta=json.loads(str(z["meta"])) if "meta" in z.files else {},
            )


class TraceRecorder:
    """Forward hook collecting a full :class:`ActivationTrace`."""

    def __init__(self):
        self.hidden: list[np.ndarray] = []
        self.attn: list[np.ndarray] = []

    def on_hidden(self, layer: int, h: np.ndarray) -> None:
        self.hidden.append(h.reshape(-1, h.shape[-1]).copy())

    def on_attention(self, layer: int, probs: np.ndarray) -> None:
        self.attn.append(probs.copy())

    def trace(self, ids=None, meta=None) -> ActivationTrace:
        return ActivationTrace(np.stack(self.hidden), list(self.attn), ids, dict(meta or {}))


class MaxAbsRecorder:
    """Forward hook keeping only the running max |hidden| (cheap per-step logging)."""

    wants_attention = False

    def __init__(self):
        self.value = 0.0

    def on_hidden(self, layer: int, h: np.ndarray) -> None:
        self.value = max(self.value, float(np.max(np.abs(h))) if h.size else 0.0)

    def on_attention(self, layer: int, probs: np.ndarray) -> None:
        pass


@dataclass
class SinkReport:
    h_avg: list[float]
    dim_order: list[int]
    residual_sink_dims: list[int]
    massive_activations: list[tuple[int, int, int, float]]
    max_abs_activation: float
    attention_sink_score: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _check_nonempty(trace: ActivationTrace) -> None:
    if trace.hidden.size == 0:
        raise ValueError("empty trace")


def avg_abs_by_dim(trace: ActivationTrace) -> np.ndarray:
    """Mean |H| per dimension over all layers (including H_0) and tokens."""
    _check_nonempty(trace)
    h = np.abs(np.asarray(trace.hidden, dtype=np.float64))
    return h.reshape(-1, h.shape[-1]).mean(axis=0)


def reorder_dims(h_avg) -> np.ndarray:
    """Descending order of ``h_avg``; equal values keep their original order."""
    return np.argsort(-np.asarray(h_avg, dtype=np.float64), kind="stable")


def attention_sink_score(trace: ActivationTrace) -> float:
    """Mean attention probability that queries put on token 0."""
    if not trace.attn:
        raise ValueError("trace has no attention maps")
    vals = np.concatenate([np.asarray(a, dtype=np.float64)[..., :, 0].reshape(-1) for a in trace.attn])
    return float(np.clip(vals.mean(), 0.0, 1.0))


def detect_residual_sinks(h_avg, ratio: float = 5.0) -> list[int]:
    h = np.asarray(h_avg, dtype=np.float64)
    if h.size < 2:
        raise ValueError("need at least 2 dimensions")
    if not ratio > 1:
        raise ValueError("ratio must exceed 1")
    return [int(j) for j in np.flatnonzero(h > ratio * np.median(h))]


def detect_massive_activations(trace: ActivationTrace, abs_thresh: float = 100.0, rel_thresh: float = 1000.0):
    """Entries (layer, token, dim, value) far above the layer's median magnitude."""
    out = []
    for i, layer in enumerate(trace.hidden):
        a = np.abs(layer)
        med = float(np.median(a)) if a.size else 0.0
        hit = (a > abs_thresh) & (a > rel_thresh * med)
        for n, j in zip(*np.nonzero(hit)):
            out.append((i, int(n), int(j), float(layer[n, j])))
    return out


def max_activation(trace: ActivationTrace) -> float:
    _check_nonempty(trace)
    return float(np.max(np.abs(trace.hidden)))


def sink_report(trace: ActivationTrace, sink_ratio: float = 5.0, abs_thresh: float = 100.0, rel_thresh: float = 1000.0) -> SinkReport:
    h_avg = avg_abs_by_dim(trace)
    return SinkReport(
        h_avg=[float(v) for v in h_avg],
        dim_order=[int(j) for j in reorder_dims(h_avg)],
        residual_sink_dims=detect_residual_sinks(h_avg, sink_ratio),
        massive_activations=detect_massive_activations(trace, abs_thresh, rel_thresh),
        max_abs_activation=max_activation(trace),
        attention_sink_score=attention_sink_score(trace) if trace.attn else 0.0,
    )


# --------------------------------------------------------------------------
# norm weights


@dataclass
class NormWeightReport:
    """Per-dimension deviation of norm affine weights from 1.

    ``weights`` stacks every norm instance's λ (or DyT γ) as rows;
    ``pre_weights`` does the same for the PreAffine λ₁ when present.
    """

    names: list[str]
    weights: np.ndarray
    deviation: np.ndarray
    top_dims: list[int]
    pre_weights: Optional[np.ndarray] = None
    pre_deviation: Optional[np.ndarray] = None
    pre_top_dims: Optional[list[int]] = None

    @property
    def max_deviation(self) -> float:
        return float(self.deviation.max()) if self.deviation.size else 0.0

    @property
    def min_weight(self) -> float:
        return float(self.weights.min())

    def to_dict(self) -> dict:
        d = {
            "max_deviation": self.max_deviation,
            "min_weight": self.min_weight,
            "top_dims": self.top_dims,
            "deviation": [float(v) for v in self.deviation],
        }
        if self.pre_deviation is not None:
            d["pre_max_deviation"] = float(self.pre_deviation.max())
            d["pre_max_weight"] = float(self.pre_weights.max())
            d["pre_top_dims"] = self.pre_top_dims
            d["pre_deviation"] = [float(v) for v in self.pre_deviation]
        return d


def norm_weight_deviation(model, top_k: int = 5) -> NormWeightReport:
    """max over norm instances of |λ_j - 1| (and |λ₁_j - 1|) for each dimension j."""
    names, lam, pre = [], [], []
    for name, norm in model.norm_layers():
        names.append(name)
        lam.append(norm.affine_weight().data.astype(np.float64))
        if norm.lambda1 is not None:
            pre.append(norm.lambda1.data.astype(np.float64))
    W = np.stack(lam)
    dev = np.abs(W - 1).max(axis=0)
    rep = NormWeightReport(names, W, dev, [int(j) for j in reorder_dims(dev)[:top_k]])
    if pre:
        P = np.stack(pre)
        pdev = np.abs(P - 1).max(axis=0)
        rep.pre_weights, rep.pre_deviation = P, pdev
        rep.pre_top_dims = [int(j) for j in reorder_dims(pdev)[:top_k]]
    return rep


def norm_bound_check(h, lam, outlier_dim: int, eps_param: float):
    """Evaluate ||RMSNorm(h)||_rms <= ||λ||_inf * sqrt((1 - r²) + ε² r²), r = |h_d| / ||h||_2.

    Requires |λ_d| <= ε ||λ||_inf and h != 0; returns (lhs, rhs, holds).
    """
    h = np.asarray(h, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if h.shape != lam.shape or h.ndim != 1:
        raise ValueError("h and lam must be vectors of equal length")
    lam_inf = float(np.max(np.abs(lam)))
    if abs(lam[outlier_dim]) > eps_param * lam_inf:
        raise ValueError("precondition |λ_d| <= ε·||λ||_inf violated")
    hn = float(np.linalg.norm(h))
    if hn == 0:
        raise ValueError("h must be nonzero")
    r = abs(h[outlier_dim]) / hn
    lhs = float(np.linalg.norm(lam * h) / hn)  # rms ratio == 2-norm ratio
    rhs = lam_inf * float(np.sqrt(max(1.0 - r * r, 0.0) + eps_param**2 * r * r))
    return lhs, rhs, lhs <= rhs + 1e-9


# --------------------------------------------------------------------------
# matrix exports


def reordered_hidden_matrix(trace: ActivationTrace, seq_len: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Layer-averaged |H| as a (tokens, d) matrix with columns sorted by ``avg_abs_by_dim``.

    With ``seq_len`` the N tokens are folded into sequences and averaged per
    position. Returns (matrix, dim_order).
    """
    h = np.abs(np.asarray(trace.hidden, dtype=np.float64)).mean(axis=0)
    if seq_len:
        h = h.reshape(-1, seq_len, h.shape[-1]).mean(axis=0)
    order = reorder_dims(avg_abs_by_dim(trace))
    return h[:, order], order


def average_attention_map(trace: ActivationTrace) -> np.ndarray:
    """Attention probabilities averaged over layers, batch and heads: (L, L)."""
    if not trace.attn:
        raise ValueError("trace has no attention maps")
    maps = [np.asarray(a, dtype=np.float64).reshape(-1, *a.shape[-2:]).mean(axis=0) for a in trace.attn]
    return np.mean(maps, axis=0)


def write_matrix_csv(path, matrix: np.ndarray, header: Optional[list] = None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in np.asarray(matrix):
            w.writerow([f"{v:.8g}" for v in row])
