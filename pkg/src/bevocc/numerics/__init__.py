"""Dense tensors, reverse-mode differentiation and the supporting plumbing."""
from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckError, grad_check, grad_check_report
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter
from .optim import AdamW, cosine_lr
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    count_macs,
    finite_checks,
    get_default_dtype,
    mac_label,
    set_default_dtype,
)

__all__ = [
    "AdamW", "CheckpointError", "Conv2d", "GradCheckError", "LayerNorm", "Linear", "Module",
    "NonFiniteError", "Parameter", "ShapeError", "Tensor", "as_tensor", "cosine_lr", "count_macs",
    "finite_checks", "get_default_dtype", "grad_check", "grad_check_report", "load_checkpoint",
    "mac_label", "ops", "save_checkpoint", "set_default_dtype",
]
