"""Label-guided attention distillation for lane segmentation, in numpy."""

from .attention import attention_distance, attention_mean
from .distill import DistillPlan, lat_loss, total_loss
from .netlib import Network, NetworkConfig, build_network, forward
from .numcore import Tensor, grad_check, no_grad, shadow64

__version__ = "0.1.0"

__all__ = [
    "DistillPlan",
    "Network",
    "NetworkConfig",
    "Tensor",
    "attention_distance",
    "attention_mean",
    "build_network",
    "forward",
    "grad_check",
    "lat_loss",
    "no_grad",
    "shadow64",
    "total_loss",
]
