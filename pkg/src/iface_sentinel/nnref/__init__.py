"""Float64 reference implementations of the two attention modules."""
from .gradcheck import GradReport, grad_check
from .io import load_params, save_params
from .lga import lga_backward, lga_forward, mixture_weights
from .ops import NNRefError
from .params import LgaParams, RcmParams
from .rcm import calibration_map, directional_context, rcm_backward, rcm_forward

__all__ = [
    "GradReport", "LgaParams", "NNRefError", "RcmParams", "calibration_map",
    "directional_context", "grad_check", "lga_backward", "lga_forward", "load_params",
    "mixture_weights", "rcm_backward", "rcm_forward", "save_params",
]
