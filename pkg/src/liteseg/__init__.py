"""Real-time semantic segmentation on a small numpy autodiff engine."""

from .blocks import SPPM, UAFM, AttentionKind, ConfigError, SegHead
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .data import AugmentConfig, ManifestDataset, Sample, SyntheticShapesDataset, augment
from .encoder import ENCODER_PRESETS, Encoder, EncoderConfig
from .losses import OhemConfig, cross_entropy, ohem_cross_entropy
from .metrics import ConfusionMatrix, miou
from .model import PRESETS, ModelConfig, PPLiteSeg, build_model, predict
from .optim import SGD, ScheduleConfig, poly_lr
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "SPPM", "UAFM", "AttentionKind", "ConfigError", "SegHead",
    "CheckpointError", "load_checkpoint", "load_into", "save_checkpoint",
    "AugmentConfig", "ManifestDataset", "Sample", "SyntheticShapesDataset", "augment",
    "ENCODER_PRESETS", "Encoder", "EncoderConfig",
    "OhemConfig", "cross_entropy", "ohem_cross_entropy",
    "ConfusionMatrix", "miou",
    "PRESETS", "ModelConfig", "PPLiteSeg", "build_model", "predict",
    "SGD", "ScheduleConfig", "poly_lr",
    "NonFiniteError", "ShapeError", "Tensor", "no_grad",
    "TrainConfig", "train",
]
