"""corrseg: multi-encoder 3D segmentation with latent cross-modality
correlation and attention fusion, robust to missing inputs."""

from .autograd import Tensor, no_grad
from .blocks import (CorrSegNet, NetworkConfig, load_checkpoint,
                     save_checkpoint)
from .data import (MODALITIES, ModalitySubset, VolumeCase, generate_case,
                   read_volume, write_volume)
from .fusion import CorrelationModel, CorrelationParams, fuse
from .losses import dice_loss, reconstruction_loss, total_loss
from .metrics import (MetricsReport, dice_score, hausdorff, region_extract,
                      sensitivity)
from .train import TrainConfig, evaluate, fit, robustness_sweep

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad",
    "CorrSegNet", "NetworkConfig", "load_checkpoint", "save_checkpoint",
    "MODALITIES", "ModalitySubset", "VolumeCase", "generate_case",
    "read_volume", "write_volume",
    "CorrelationModel", "CorrelationParams", "fuse",
    "dice_loss", "reconstruction_loss", "total_loss",
    "MetricsReport", "dice_score", "hausdorff", "region_extract",
    "sensitivity",
    "TrainConfig", "evaluate", "fit", "robustness_sweep",
]
