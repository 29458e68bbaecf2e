"""Generative low-rank adapters.

Instead of storing the LoRA factors ``B`` and ``A`` directly, each basis
vector is synthesised from a learned latent vector by a small generator: the
latent is normalised group by group and expanded over a Gaussian RBF grid
plus a SiLU base path.
"""

from .adapters import (GenLoraState, LoraState, adapter_backward, adapter_forward, genlora_init,
                       load_model_spec, lora_init, merge, param_count_genlora, param_count_lora)
from .errors import FormatError, GenLoraError, NumericalError, ParameterError, SchemaError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "GenLoraState", "LoraState", "adapter_backward", "adapter_forward", "genlora_init",
    "load_model_spec", "lora_init", "merge", "param_count_genlora", "param_count_lora",
    "FormatError", "GenLoraError", "NumericalError", "ParameterError", "SchemaError", "ShapeError",
]
