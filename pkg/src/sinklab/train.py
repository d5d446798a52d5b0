"""Deterministic byte-level training: data windows, AdamW, warmup+cosine, clipping, divergence."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .instrument import MaxAbsRecorder, max_activation
from .model import ConfigError, Model, forward

log = logging.getLogger(__name__)

BOS = 256
VOCAB_SIZE = 257


def tokenize(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ValueError(f"token id outside [0, {VOCAB_SIZE})")
    return ids[ids != BOS].astype(np.uint8).tobytes()


@dataclass
class RunConfig:
    peak_lr: float = 2e-3
    min_lr: float = 2e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 1
    trace_every: int = 0
    eval_batches: int = 8
    divergence_factor: float = 3.0
    divergence_patience: int = 100

    def validate(self) -> "RunConfig":
        if not (isinstance(self.total_steps, int) and self.total_steps > 0):
            raise ConfigError("total_steps must be a positive integer")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be >= 0 and < total_steps")
        if not self.peak_lr > self.min_lr >= 0:
            raise ConfigError("need peak_lr > min_lr >= 0")
        for name in ("batch_size", "seq_len", "log_every", "eval_batches", "divergence_patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.trace_every < 0:
            raise ConfigError("trace_every must be >= 0")
        if self.grad_clip_norm <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("grad_clip_norm and adam_eps must be positive, weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run config key(s): {', '.join(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# data


def windows(corpus: np.ndarray, batch_size: int, seq_len: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of random contiguous windows; targets are inputs shifted by one."""
    corpus = np.asarray(corpus, dtype=np.int64)
    n_windows = corpus.shape[0] - seq_len
    if n_windows < 1:
        raise ValueError(f"corpus of {corpus.shape[0]} tokens is too short for seq_len {seq_len}")
    rng = np.random.default_rng(seed)
    idx = np.arange(seq_len + 1)
    while True:
        offs = rng.integers(0, n_windows, size=batch_size)
        win = corpus[offs[:, None] + idx[None, :]]
        yield win[:, :-1], win[:, 1:]


def batch_iter(corpus: np.ndarray, cfg: RunConfig, seed: Optional[int] = None):
    return windows(corpus, cfg.batch_size, cfg.seq_len, cfg.seed if seed is None else seed)


EVAL_SEED = 1234


def eval_batches(corpus: np.ndarray, n_batches: int, batch_size: int, seq_len: int, seed: int = EVAL_SEED) -> list:
    it = windows(corpus, batch_size, seq_len, seed)
    return [next(it) for _ in range(n_batches)]


def eval_loss(model: Model, corpus: np.ndarray, n_batches: int, batch_size: int = 16, seq_len: int = 64, seed: int = EVAL_SEED) -> float:
    """Mean cross-entropy over fixed seeded batches of ``corpus``; parameters are not touched."""
    return mean_loss(model, eval_batches(corpus, n_batches, batch_size, seq_len, seed))


def mean_loss(model: Model, batches) -> float:
    total = 0.0
    for ids, tgt in batches:
        logits, _ = forward(model, ids)
        total += float(T.cross_entropy(logits, tgt).data)
    return total / len(batches)


# --------------------------------------------------------------------------
# optimization


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to min_lr at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamState, lr: float, cfg: RunConfig) -> None:
    """In-place AdamW; weight decay skipped for vectors (norm weights, λ₁, DyT α/γ/β)."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not p.requires_grad:
            continue
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if p.data.ndim >= 2 and cfg.weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * cfg.weight_decay)
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= (lr * upd).astype(p.data.dtype)


def global_grad_clip(grads, max_norm: float):
    """Scale gradients so their joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    sq = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)
    norm = math.sqrt(sq)
    if norm > max_norm and math.isfinite(norm):
        f = max_norm / norm
        grads = [None if g is None else g * np.asarray(f, dtype=g.dtype) for g in grads]
    return grads, norm


# --------------------------------------------------------------------------
# loop


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    grad_norm: float
    max_abs_activation: float
    diverged: bool

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), allow_nan=True)


@dataclass
class RunMetrics:
    records: list[StepRecord] = field(default_factory=list)
    diverged: bool = False
    final_eval_loss: Optional[float] = None
    peak_abs_activation: float = 0.0
    steps_run: int = 0

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("steps must increase")
        self.diverged = self.diverged or rec.diverged
        rec.diverged = self.diverged
        self.records.append(rec)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def _compute_loss(model: Model, ids, tgt, recorder=None, trace=False):
    with T.Tape() as tape:
        logits, tr = forward(model, ids, trace=trace, recorder=recorder)
        loss = T.cross_entropy(logits, tgt)
    return loss, tape, tr


def train_loop(
    model: Model,
    corpus: np.ndarray,
    cfg: RunConfig,
    on_trace: Optional[Callable[[int, object], None]] = None,
    on_log: Optional[Callable[[StepRecord], None]] = None,
) -> RunMetrics:
    """Train in place and return per-step metrics.

    Divergence (non-finite loss, or loss above ``divergence_factor`` x the
    step-0 loss for ``divergence_patience`` consecutive steps) stops the run
    and is reported, not raised. Every ``trace_every`` steps the step's full
    activation trace is passed to ``on_trace(step, trace)``.
    """
    cfg.validate()
    params = model.parameters()
    state = AdamState()
    metrics = RunMetrics()
    stream = batch_iter(corpus, cfg)
    loss0 = None
    over = 0
    for step in range(cfg.total_steps):
        ids, tgt = next(stream)
        want_trace = on_trace is not None and cfg.trace_every and (step % cfg.trace_every == 0 or step == cfg.total_steps - 1)
        rec = MaxAbsRecorder()
        loss, tape, tr = _compute_loss(model, ids, tgt, recorder=None if want_trace else rec, trace=bool(want_trace))
        max_abs = max_activation(tr) if want_trace else rec.value
        lval = float(loss.data)
        if want_trace:
            on_trace(step, tr)
        if loss0 is None:
            loss0 = lval
        diverged = not math.isfinite(lval)
        over = over + 1 if lval > cfg.divergence_factor * loss0 else 0
        diverged = diverged or over >= cfg.divergence_patience
        lr = lr_at(step + 1, cfg)
        gnorm = float("nan")
        if not diverged:
            model.zero_grad()
            T.backward(loss, tape)
            grads, gnorm = global_grad_clip([p.grad for p in params], cfg.grad_clip_norm)
            if math.isfinite(gnorm):
                adamw_step(params, grads, state, lr, cfg)
            else:
                diverged = True
        metrics.peak_abs_activation = max(metrics.peak_abs_activation, max_abs) if math.isfinite(max_abs) else float("inf")
        metrics.steps_run = step + 1
        if diverged or step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            r = StepRecord(step, lval, lr, gnorm, max_abs, diverged)
            metrics.append(r)
            if on_log is not None:
                on_log(r)
        if diverged:
            log.warning("run diverged at step %d (loss %.4g)", step, lval)
            break
    model.zero_grad()
    return metrics
