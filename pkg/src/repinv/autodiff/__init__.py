"""Minimal NHWC tensor graphs with reverse-mode differentiation."""

from repinv.autodiff.graph import Evaluation, Graph, GraphError, NonFiniteError, backward, evaluate
from repinv.autodiff.ops import causal_mask, log_softmax
from repinv.autodiff.optim import AdamState, adam_step, conv_init, dense_init, glorot_uniform

__all__ = [
    "AdamState",
    "Evaluation",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "adam_step",
    "backward",
    "causal_mask",
    "conv_init",
    "dense_init",
    "evaluate",
    "glorot_uniform",
    "log_softmax",
]
