"""Systolic-array reliability workbench.

Bit-accurate MAC and tile timing simulation, workload-aware fmax analysis,
sign-flip-reducing dataflow reordering, and statistically gated ABFT with
fault injection on a desk-scale quantized network.
"""

from .core import (
    I8_MAX,
    I8_MIN,
    QuantTensor,
    SeededStream,
    SignMatrix,
    WideTensor,
    dequantize,
    load_tensor,
    mix64,
    quantize,
    save_tensor,
    sign_matrix,
)
from .env import AgingParams, GuardbandParams, TimingEnv, VariationParams

__all__ = [
    "I8_MAX",
    "I8_MIN",
    "QuantTensor",
    "SeededStream",
    "SignMatrix",
    "WideTensor",
    "dequantize",
    "load_tensor",
    "mix64",
    "quantize",
    "save_tensor",
    "sign_matrix",
    "AgingParams",
    "GuardbandParams",
    "TimingEnv",
    "VariationParams",
]

__version__ = "0.1.0"
