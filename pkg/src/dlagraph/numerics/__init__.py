"""Reference executor and its dense float64 kernels."""

from .executor import (BN_MOMENTUM, GradCheckEntry, GradReport, GradStore, Mode,
                       ParamStore, ShapeMismatch, StaleTape, Tape, backward,
                       cross_entropy, forward, grad_check, init_params, sgd_step)
from .ops import (bilinear_kernel_1d, bilinear_upsample_weight, conv_apply,
                  conv_apply_adjoint, conv_weight_grad)

__all__ = [
    "BN_MOMENTUM", "GradCheckEntry", "GradReport", "GradStore", "Mode",
    "ParamStore", "ShapeMismatch", "StaleTape", "Tape", "backward",
    "cross_entropy", "forward", "grad_check", "init_params", "sgd_step",
    "bilinear_kernel_1d", "bilinear_upsample_weight", "conv_apply",
    "conv_apply_adjoint", "conv_weight_grad",
]
