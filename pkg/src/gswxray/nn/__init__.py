"""Small numpy convolutional classifier with hand-written backpropagation."""

from gswxray.nn.layers import LAYER_KINDS, Layer, ShapeError
from gswxray.nn.network import (
    BACKBONE,
    HEAD,
    Network,
    Trace,
    backward,
    build_classifier,
    classify,
    classify_batch,
    forward,
    loss,
    predict_proba,
)
from gswxray.nn.train import FptPlan, FptResult, OptimizerConfig, sgd_momentum_step, train_fpt

__all__ = [
    "BACKBONE",
    "HEAD",
    "LAYER_KINDS",
    "FptPlan",
    "FptResult",
    "Layer",
    "Network",
    "OptimizerConfig",
    "ShapeError",
    "Trace",
    "backward",
    "build_classifier",
    "classify",
    "classify_batch",
    "forward",
    "loss",
    "predict_proba",
    "sgd_momentum_step",
    "train_fpt",
]
