"""Patch-based hard-exudate segmentation for retinal fundus images.

Pipeline: balanced 32x32 patch extraction from 256x256 fundus images,
training of an eight-convolution classifier with hand-written gradients
and Adam, sliding-window whole-image inference, and confusion-matrix
evaluation.
"""

from .dataset import (
    FundusImage,
    GroundTruthMask,
    PatchSet,
    extract_balanced,
    load_image,
    load_mask,
    load_patchset,
    resize_mask,
    resize_to_working,
    save_patchset,
)
from .inference import PredictionMask, overlay, predict_image, write_mask
from .metrics import ConfusionMatrix, EvalReport, aggregate, confusion, report
from .model import LayerSpec, Model, ModelConfig, default_config
from .tensor import Rng, Tensor
from .training import (
    Adam,
    Checkpoint,
    TrainSchedule,
    load_checkpoint,
    save_checkpoint,
    softmax_cross_entropy,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Checkpoint",
    "ConfusionMatrix",
    "EvalReport",
    "FundusImage",
    "GroundTruthMask",
    "LayerSpec",
    "Model",
    "ModelConfig",
    "PatchSet",
    "PredictionMask",
    "Rng",
    "Tensor",
    "TrainSchedule",
    "aggregate",
    "confusion",
    "default_config",
    "extract_balanced",
    "load_checkpoint",
    "load_image",
    "load_mask",
    "load_patchset",
    "overlay",
    "predict_image",
    "report",
    "resize_mask",
    "resize_to_working",
    "save_checkpoint",
    "save_patchset",
    "softmax_cross_entropy",
    "train",
    "write_mask",
]
