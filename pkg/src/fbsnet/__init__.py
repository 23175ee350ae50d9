"""numpy engine for the FBSNet real-time segmentation network."""
from .analysis import AnalysisReport, analyze, count_macs, count_params, receptive_field, shape_trace
from .estimator import FBSNetSegmenter
from .model import ModelConfig, ModelGraph, build, forward, init_weights, load_weights, predict_labels, save_weights
from .tensor import Tensor, backward, no_grad
from .training import (ConfusionMatrix, PolySchedule, TrainConfig, ce_ohem_loss, evaluate, make_toy_dataset,
                       miou, poly_lr, train_loop)

__version__ = "0.1.0"

__all__ = [
    "AnalysisReport", "ConfusionMatrix", "FBSNetSegmenter", "ModelConfig", "ModelGraph", "PolySchedule",
    "Tensor", "TrainConfig", "analyze", "backward", "build", "ce_ohem_loss", "count_macs", "count_params",
    "evaluate", "forward", "init_weights", "load_weights", "make_toy_dataset", "miou", "no_grad",
    "poly_lr", "predict_labels", "receptive_field", "save_weights", "shape_trace", "train_loop",
]
