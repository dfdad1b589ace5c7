"""bitgrad: quantization-aware training with learnable per-group bit widths,
a differentiable bit-operation cost model, and a compiler from calibrated
models to a bit-exact integer shift-add graph."""

from .autodiff import Tensor
from .checkpoint import (
    CheckpointError,
    load_calibrated,
    load_train_checkpoint,
    rebuild_model,
    save_calibrated,
    save_train_checkpoint,
)
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, load_csv, split, synth_dataset
from .fxp import (
    FixedPointFormat,
    QuantizerState,
    expected_log_ratio_mc,
    mantissa_of,
    parse_format_token,
    quantize_deploy,
    quantize_elementwise,
)
from .ir import IRError, emit_ir, parse_ir
from .layers import CalibratedModel, QDense, QModel, deploy_forward
from .lowering import FxpGraph, FxpValue, adder_count, interpret, interpret_batch, lower
from .resource import (
    BitOpsReport,
    LossConfig,
    bitops_exact,
    bitops_surrogate,
    bitwidth_sum,
    calibrate,
    combined_resource,
    csd_decode,
    csd_encode,
    csd_nonzero_count,
    lut_estimate,
    total_loss,
)
from .training import (
    Adam,
    ParetoSet,
    TrainResult,
    TrainSettings,
    TrainingDiverged,
    cosine_restarts_lr,
    evaluate,
    metrics_csv,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BitOpsReport",
    "CalibratedModel",
    "CheckpointError",
    "ConfigError",
    "Dataset",
    "ExperimentConfig",
    "FixedPointFormat",
    "FxpGraph",
    "FxpValue",
    "IRError",
    "LossConfig",
    "ParetoSet",
    "QDense",
    "QModel",
    "QuantizerState",
    "Tensor",
    "TrainResult",
    "TrainSettings",
    "TrainingDiverged",
    "adder_count",
    "bitops_exact",
    "bitops_surrogate",
    "bitwidth_sum",
    "calibrate",
    "combined_resource",
    "cosine_restarts_lr",
    "csd_decode",
    "csd_encode",
    "csd_nonzero_count",
    "deploy_forward",
    "emit_ir",
    "evaluate",
    "expected_log_ratio_mc",
    "interpret",
    "interpret_batch",
    "load_calibrated",
    "load_config",
    "load_csv",
    "load_train_checkpoint",
    "lower",
    "lut_estimate",
    "mantissa_of",
    "metrics_csv",
    "parse_format_token",
    "parse_ir",
    "quantize_deploy",
    "quantize_elementwise",
    "rebuild_model",
    "save_calibrated",
    "save_train_checkpoint",
    "split",
    "synth_dataset",
    "total_loss",
    "train",
]
