from .tensor import Tensor
from .unet import DenoiserConfig, UNet, timestep_embedding
from .condition import ConditioningSpec
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainState, evaluate_loss, train
from .pipeline import denoise_volume, ema_network, synthesize

__all__ = [
    "Tensor",
    "DenoiserConfig",
    "UNet",
    "timestep_embedding",
    "ConditioningSpec",
    "CheckpointFormatError",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "TrainState",
    "evaluate_loss",
    "train",
    "denoise_volume",
    "ema_network",
    "synthesize",
]
