"""GRU-gated graph convolution classifier with ASAP pooling, in numpy."""
from .model import (
    BatchedGraph,
    ForwardTrace,
    GgcnConfig,
    NonFiniteActivation,
    ParamStore,
    StaleTraceError,
    backward,
    classify_forward,
    cross_entropy,
    init_params,
    predict_proba,
    softmax,
    update_running_stats,
)

__all__ = [
    "BatchedGraph", "ForwardTrace", "GgcnConfig", "NonFiniteActivation", "ParamStore",
    "StaleTraceError", "backward", "classify_forward", "cross_entropy", "init_params",
    "predict_proba", "softmax", "update_running_stats",
]
