from .checkpoint import Checkpoint, load_checkpoint, loads_checkpoint, dumps_checkpoint, save_checkpoint
from .model import (
    ModelConfig,
    embed,
    forward,
    init_params,
    linear_weight_names,
    mhsa_forward,
    model_forward,
    parameter_shapes,
    patchify,
    predict_logits,
)
from .train import TrainConfig, TrainHistory, backward, cross_entropy, loss_and_grads, train

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "TrainConfig",
    "TrainHistory",
    "backward",
    "cross_entropy",
    "dumps_checkpoint",
    "embed",
    "forward",
    "init_params",
    "linear_weight_names",
    "load_checkpoint",
    "loads_checkpoint",
    "loss_and_grads",
    "mhsa_forward",
    "model_forward",
    "parameter_shapes",
    "patchify",
    "predict_logits",
    "save_checkpoint",
    "train",
]
