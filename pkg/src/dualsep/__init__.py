"""Dual-mode (online/offline) RNN speech separation in numpy."""

from .dualpath import PathSelector, Scheme
from .models import FdModel, FdModelConfig, TdModel, TdModelConfig, init_from_offline, load_checkpoint, save_checkpoint
from .numcore import Tensor, grad_check

__all__ = [
    "FdModel",
    "FdModelConfig",
    "PathSelector",
    "Scheme",
    "TdModel",
    "TdModelConfig",
    "Tensor",
    "grad_check",
    "init_from_offline",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
