"""Norm-aware global pooling: kernels, gradients, metrics, and a toy trainer."""

from .layers import (
    GnapState,
    GradBundle,
    gnap_backward,
    gnap_forward,
    gnap_forward_fused,
    reweight,
    reweight_backward,
)
from .metrics import MetricsReport, ScoreSet, compute_report
from .toy import ToyConfig, train

__version__ = "0.1.0"

__all__ = [
    "GnapState",
    "GradBundle",
    "MetricsReport",
    "ScoreSet",
    "ToyConfig",
    "compute_report",
    "gnap_backward",
    "gnap_forward",
    "gnap_forward_fused",
    "reweight",
    "reweight_backward",
    "train",
    "__version__",
]
