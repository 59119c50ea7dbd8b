"""Entropy attention maps for small Vision Transformers.

Estimate the per-weight entropy of attention maps over a calibration set,
freeze low-entropy weights to their calibration means, and measure the
accuracy and FLOPs trade-off with and without low-bit fake quantisation.
"""
from .complexity import FlopsReport, flops_layer, flops_mhsa, flops_mlp, savings
from .data import Dataset, Normalization, SyntheticSpec, generate_shapes, load_idx, save_idx, train_test_split
from .errors import (
    ConfigError,
    CounterOverflowError,
    CountMismatchError,
    DimensionError,
    EamError,
    EmptyCalibrationError,
    FormatError,
    MagicError,
    NumericError,
    RangeError,
    TrainingError,
    TruncationError,
    VersionError,
)
from .estimators import EntropyAttentionFixer, ViTClassifier
from .fixing import FixPlan, apply_fixing, build_plan, load_plan, random_plan, save_plan, select_threshold
from .quant import QuantConfig, QuantParams, calibrate_minmax, calibrate_model, fake_quantize
from .stats import (
    HistogramBank,
    bin_index,
    entropy_map,
    kl_map,
    load_bank,
    mean_map,
    merge,
    run_calibration,
    save_bank,
)
from .vit import Checkpoint, ModelConfig, TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConfigError",
    "CountMismatchError",
    "CounterOverflowError",
    "Dataset",
    "DimensionError",
    "EamError",
    "EmptyCalibrationError",
    "EntropyAttentionFixer",
    "FixPlan",
    "FlopsReport",
    "FormatError",
    "HistogramBank",
    "MagicError",
    "ModelConfig",
    "Normalization",
    "NumericError",
    "QuantConfig",
    "QuantParams",
    "RangeError",
    "SyntheticSpec",
    "TrainConfig",
    "TrainingError",
    "TruncationError",
    "VersionError",
    "ViTClassifier",
    "apply_fixing",
    "bin_index",
    "build_plan",
    "calibrate_minmax",
    "calibrate_model",
    "entropy_map",
    "fake_quantize",
    "flops_layer",
    "flops_mhsa",
    "flops_mlp",
    "generate_shapes",
    "kl_map",
    "load_bank",
    "load_checkpoint",
    "load_idx",
    "load_plan",
    "mean_map",
    "merge",
    "random_plan",
    "save_bank",
    "save_checkpoint",
    "save_idx",
    "savings",
    "select_threshold",
    "train_test_split",
]
