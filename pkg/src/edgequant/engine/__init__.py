"""Inference engine: float kernels, integer requantization and the executor."""

from .executor import ExecMode, Executor, mode_for, parse_mode, run
from .fixedpoint import FixedPointMultiplier, quantize_multiplier, saturating_rounding_multiply

__all__ = [
    "ExecMode",
    "Executor",
    "FixedPointMultiplier",
    "mode_for",
    "parse_mode",
    "quantize_multiplier",
    "run",
    "saturating_rounding_multiply",
]
