"""Desk-scale encodings of the ablation rows, plus the smoke and reference configs.

Every row shares the reference geometry (D=4, d=128, 4/2 heads, head_dim 32)
and has its FFN width set so the parameter count matches row 1 at f=344.
"""

from __future__ import annotations

import dataclasses

from .model import ModelConfig, adjust_ffn_for_parity, param_count
from .quantsim import W4A4, W8A8
from .train import RunConfig

BASE_FFN = 344
BASELINE_LR = 4.3e-3

# name: (model overrides, peak lr)
ROWS = {
    "row01": ({}, BASELINE_LR),
    "row02": ({"attn_gated": True}, BASELINE_LR),
    "row07": ({"norm_variant": "dyt"}, 5e-4),
    "row08": ({"norm_variant": "dyt", "attn_gated": True}, 2e-3),
    "row09": ({"norm_variant": "gateddyt", "attn_gated": True}, 2e-3),
    "row10": ({"residual_clip": 10.0}, BASELINE_LR),
    "row11": ({"residual_clip": 100.0}, BASELINE_LR),
    "row12": ({"residual_clip": 1000.0}, BASELINE_LR),
    "row13": ({"attn_gated": True, "residual_clip": 10.0}, BASELINE_LR),
    "row14": ({"attn_gated": True, "residual_clip": 1000.0}, BASELINE_LR),
    "row15": ({"ffn_activation": "sigmoid"}, BASELINE_LR),
    "row16": ({"attn_gated": True, "ffn_activation": "sigmoid"}, BASELINE_LR),
    "row17": ({"attn_gated": True, "norm_variant": "preaffine", "ffn_activation": "sigmoid"}, BASELINE_LR),
    "row18": ({"attn_gated": True, "norm_variant": "gatednorm", "ffn_activation": "sigmoid"}, BASELINE_LR),
    "row19": ({"attn_gated": True, "norm_variant": "preaffine"}, BASELINE_LR),
    "row20": ({"attn_gated": True, "norm_variant": "gatednorm"}, BASELINE_LR),
}

ROW_LABELS = {
    "row01": "baseline",
    "row02": "GA",
    "row07": "DyT",
    "row08": "DyT, GA",
    "row09": "DyT, GA, GatedDyT",
    "row10": "clip 10",
    "row11": "clip 100",
    "row12": "clip 1000",
    "row13": "GA, clip 10",
    "row14": "GA, clip 1000",
    "row15": "GLU",
    "row16": "GA, GLU",
    "row17": "GA, PreAffine, GLU",
    "row18": "GA, GatedNorm, GLU",
    "row19": "GA, PreAffine",
    "row20": "GA, GatedNorm",
}


def parity_target() -> int:
    return param_count(ModelConfig(ffn_dim=BASE_FFN))


def row_model(name: str) -> ModelConfig:
    overrides, _ = ROWS[name]
    cfg = dataclasses.replace(ModelConfig(ffn_dim=BASE_FFN), **overrides)
    return adjust_ffn_for_parity(cfg, parity_target())


def _experiment(label: str, model: ModelConfig, run: RunConfig, quant=(W8A8, W4A4)) -> dict:
    return {
        "label": label,
        "model": model.to_dict(),
        "run": run.to_dict(),
        "quant": [q.to_dict() for q in quant],
        "corpus_path": "bundled",
        "output_dir": f"runs/{label}",
    }


def experiment_configs() -> dict[str, dict]:
    """All bundled experiment configs keyed by file stem."""
    out = {
        "smoke": _experiment(
            "smoke",
            ModelConfig(n_layers=2, d_model=64, n_heads=4, n_kv_heads=2, head_dim=16, ffn_dim=172, gate_rank=8),
            RunConfig(total_steps=50, warmup_steps=10, trace_every=25, eval_batches=2),
        ),
        "reference": _experiment("reference", ModelConfig(), RunConfig()),
    }
    for name, (_, lr) in ROWS.items():
        out[name] = _experiment(name, row_model(name), RunConfig(peak_lr=lr, min_lr=lr / 10))
    return out
