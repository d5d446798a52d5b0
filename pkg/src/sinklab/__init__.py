"""Desk-scale transformer lab for activation outliers, sinks and rescaling mitigations."""

from .instrument import (
    ActivationTrace,
    SinkReport,
    attention_sink_score,
    avg_abs_by_dim,
    detect_massive_activations,
    detect_residual_sinks,
    max_activation,
    norm_bound_check,
    norm_weight_deviation,
    reorder_dims,
    sink_report,
)
from .model import (
    ConfigError,
    Model,
    ModelConfig,
    adjust_ffn_for_parity,
    build_model,
    forward,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .quantsim import W4A4, W8A8, QuantSpec, eval_quantized, fake_quant_act_per_token, fake_quant_weight, quantize_value
from .tensor import Tape, Tensor, backward, finite_diff_check, precision
from .train import RunConfig, RunMetrics, eval_loss, train_loop

__version__ = "0.1.0"
