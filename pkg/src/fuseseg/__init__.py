"""Promptable surgical-video segmentation with residual/LoRA feature fusion."""

from .data import (
    GenConfig,
    InstrumentClip,
    VideoSample,
    augment_case,
    class_distribution,
    composite_instrument,
    generate_instrument_clip,
    generate_synthetic_case,
)
from .fusion import FeatureMap, FusionBlock, FusionOutput, grad_check
from .harness import ExperimentConfig, cmd_ablate, cmd_augment, cmd_eval, cmd_generate, cmd_train
from .losses import LossWeights, PredictionTargetPair, ce_loss, composite_loss, dice_loss, focal_loss, mae_loss
from .memory import BankConfig, MemoryBank, MemoryEntry, MemoryKind
from .metrics import ConfusionCounts, dice_scores, iou_scores
from .model import BoxPrompt, MaskPrediction, ModelConfig, SegModel

__all__ = [
    "BankConfig",
    "BoxPrompt",
    "ConfusionCounts",
    "ExperimentConfig",
    "FeatureMap",
    "FusionBlock",
    "FusionOutput",
    "GenConfig",
    "InstrumentClip",
    "LossWeights",
    "MaskPrediction",
    "MemoryBank",
    "MemoryEntry",
    "MemoryKind",
    "ModelConfig",
    "PredictionTargetPair",
    "SegModel",
    "VideoSample",
    "augment_case",
    "ce_loss",
    "class_distribution",
    "cmd_ablate",
    "cmd_augment",
    "cmd_eval",
    "cmd_generate",
    "cmd_train",
    "composite_instrument",
    "composite_loss",
    "dice_loss",
    "dice_scores",
    "focal_loss",
    "generate_instrument_clip",
    "generate_synthetic_case",
    "grad_check",
    "iou_scores",
    "mae_loss",
]
__version__ = "0.1.0"
