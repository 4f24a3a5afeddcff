"""Joint image/label flow matching for generation and uncertainty-aware classification."""

from .errors import (
    ConfigMismatch,
    DataError,
    FormatError,
    InvalidArgument,
    InvalidInput,
    InvalidState,
    NumericFailure,
    PaletteExhausted,
)
from .model import VelocityNet, VelocityNetConfig, full_config, toy_config
from .palette import ClassPalette, build_palette, decode_prediction, encode_label
from .solver import IntegrationSpec, integrate

__version__ = "0.1.0"

__all__ = [
    "ClassPalette",
    "ConfigMismatch",
    "DataError",
    "FormatError",
    "IntegrationSpec",
    "InvalidArgument",
    "InvalidInput",
    "InvalidState",
    "NumericFailure",
    "PaletteExhausted",
    "VelocityNet",
    "VelocityNetConfig",
    "build_palette",
    "decode_prediction",
    "encode_label",
    "integrate",
    "full_config",
    "toy_config",
]
