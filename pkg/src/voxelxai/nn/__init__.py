from .network import (
    NetworkSpec,
    Model,
    build_model,
    forward,
    mhl_forward,
    grad_wrt_activation,
    class_logit_scorer,
)
from .layers import attention_head, softmax
from .training import TrainConfig, LabeledCohort, TrainReport, train
from .augment import AugmentConfig, ZCAWhitener, augment

__all__ = [
    "NetworkSpec",
    "Model",
    "build_model",
    "forward",
    "mhl_forward",
    "grad_wrt_activation",
    "class_logit_scorer",
    "attention_head",
    "softmax",
    "TrainConfig",
    "LabeledCohort",
    "TrainReport",
    "train",
    "AugmentConfig",
    "ZCAWhitener",
    "augment",
]
