"""Recurrent regression from visual feature sequences to sound features."""
from .align import align_shifts, aligned_loss, labeling_cost
from .loss import robust_loss
from .lstm import LstmLayer, LstmNetwork, load_checkpoint, save_checkpoint
from .regressor import LstmRegressor, replicate_features, splice_index, stitch
from .training import TrainConfig, TrainingDiverged, clip_by_global_norm, train

__all__ = [
    "LstmLayer", "LstmNetwork", "LstmRegressor", "TrainConfig", "TrainingDiverged",
    "align_shifts", "aligned_loss", "clip_by_global_norm", "labeling_cost",
    "load_checkpoint", "replicate_features", "robust_loss", "save_checkpoint",
    "splice_index", "stitch", "train",
]
