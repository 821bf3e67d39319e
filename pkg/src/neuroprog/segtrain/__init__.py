"""Segmentation training: losses, metrics, data and the candidate trainer."""

from .data import DataError, Sample, SegDataset, augment, ingest_fundus, load_dataset, synth_vessels
from .losses import FocalParams, dice_loss, focal_loss, jaccard_loss, make_loss
from .metrics import Metrics, auc, confusion_and_metrics, pairwise_auc
from .train import TrainConfig, TrainResult, evaluate, predict_proba, train_candidate

__all__ = [
    "DataError",
    "Sample",
    "SegDataset",
    "augment",
    "ingest_fundus",
    "load_dataset",
    "synth_vessels",
    "FocalParams",
    "dice_loss",
    "focal_loss",
    "jaccard_loss",
    "make_loss",
    "Metrics",
    "auc",
    "confusion_and_metrics",
    "pairwise_auc",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "predict_proba",
    "train_candidate",
]
