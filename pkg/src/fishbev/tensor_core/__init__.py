"""Minimal dense tensors with tape-based reverse-mode differentiation."""

from . import ops
from .fbt import FBTError, read_fbt, write_fbt
from .gradcheck import finite_diff_check, gradient_errors
from .ops import (
    ShapeError,
    bilinear_sample,
    conv2d,
    dropout,
    elementwise,
    interp_resize,
    layer_normalize,
    linear,
    softmax_lastdim,
)
from .params import CheckpointError, ParamStore, read_checkpoint
from .tensor import Tape, Tensor, as_tensor, backward, no_tape

__all__ = [
    "CheckpointError", "FBTError", "ParamStore", "ShapeError", "Tape", "Tensor",
    "as_tensor", "backward", "bilinear_sample", "conv2d", "dropout", "elementwise",
    "finite_diff_check", "gradient_errors", "interp_resize", "layer_normalize",
    "linear", "no_tape", "ops", "read_checkpoint", "read_fbt", "softmax_lastdim",
    "write_fbt",
]
