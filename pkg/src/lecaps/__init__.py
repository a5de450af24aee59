"""Capsule networks with a lightweight multi-scale primary-capsule
generator, built on a from-scratch numpy autodiff backend."""

from .estimator import CapsuleNetClassifier
from .layers import CapsuleBundle, CfcLayer, capsule_dropout, reshape_to_primary_caps, squash
from .losses import LossParams, margin_loss, reconstruction_loss, total_loss
from .models import (
    BaselineCapsNet,
    LeCapsNet,
    ModelConfig,
    baseline_config,
    build_model,
    lecaps_config,
)
from .pcg import PrimaryCapsuleGenerator, count_primary_caps
from .routing import RoutingLayer, capsule_lengths, classify
from .tensor import Tensor, no_grad, use_dtype

__version__ = "0.1.0"

__all__ = [
    "CapsuleNetClassifier",
    "CapsuleBundle",
    "CfcLayer",
    "capsule_dropout",
    "reshape_to_primary_caps",
    "squash",
    "LossParams",
    "margin_loss",
    "reconstruction_loss",
    "total_loss",
    "BaselineCapsNet",
    "LeCapsNet",
    "ModelConfig",
    "baseline_config",
    "build_model",
    "lecaps_config",
    "PrimaryCapsuleGenerator",
    "count_primary_caps",
    "RoutingLayer",
    "capsule_lengths",
    "classify",
    "Tensor",
    "no_grad",
    "use_dtype",
    "__version__",
]
