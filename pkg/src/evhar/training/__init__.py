from .augment import AugmentConfig, augment, resolve_augment_classes
from .data import ClipDataset, load_dataset, split_indices
from .losses import FocalLossConfig, class_weights, cross_entropy, focal_loss
from .metrics import Metrics, confusion_matrix, diagonal_dominant, metrics
from .optim import AdamWState, OptimizerConfig, adamw_step, adamw_update
from .trainer import TrainConfig, Trainer, TrainReport, train

__all__ = [
    "AdamWState",
    "AugmentConfig",
    "ClipDataset",
    "FocalLossConfig",
    "Metrics",
    "OptimizerConfig",
    "TrainConfig",
    "TrainReport",
    "Trainer",
    "adamw_step",
    "adamw_update",
    "augment",
    "class_weights",
    "confusion_matrix",
    "cross_entropy",
    "diagonal_dominant",
    "focal_loss",
    "load_dataset",
    "metrics",
    "resolve_augment_classes",
    "split_indices",
    "train",
]
