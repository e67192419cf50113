"""Hand-differentiated U-Net, regression head and ADAM training."""

from .model import ModelConfig, backward, count_params, forward, init_params, predict_normalized
from .train import AdamState, TrainParams, TrainResult, adam_step, loss_and_grad, train

__all__ = [
    "ModelConfig", "forward", "backward", "init_params", "count_params", "predict_normalized",
    "AdamState", "TrainParams", "TrainResult", "adam_step", "loss_and_grad", "train",
]
