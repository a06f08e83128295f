"""Bit-accurate W4A8 quantization scheme and engine-level simulator for
bidirectional Mamba vision encoders: APoT per-block weights, dynamic per-token
INT8 activations, a shift-LUT linear engine, a three-stage SSM engine, and the
surrounding model graph, containers and CLI.
"""

from ._kernels import active_backend, thread_count
from .codebook import ApotCodebook, build_codebook, default_codebook
from .config import ModelConfig, load_config_file, parse_config_text
from .container import Tensor, read_container, write_container
from .counters import CounterRecord, PerfCounters
from .linear import TileConfig, linear_forward_quantized, linear_forward_reference
from .model import Model, model_forward, quantize_model, random_images, random_model
from .packing import PackedWeightBlob, pack_weights, unpack_weights
from .quant import ActQuantConfig, QuantizedWeights, quantize_activations
from .selftest import run_selftest
from .ssm import SsmConfig, SsmParams, ssm_forward, ssm_scan_oracle
from .store import load_images, load_model, save_images, save_model

__version__ = "0.1.0"

__all__ = [
    "ActQuantConfig",
    "ApotCodebook",
    "CounterRecord",
    "Model",
    "ModelConfig",
    "PackedWeightBlob",
    "PerfCounters",
    "QuantizedWeights",
    "SsmConfig",
    "SsmParams",
    "Tensor",
    "TileConfig",
    "active_backend",
    "build_codebook",
    "default_codebook",
    "linear_forward_quantized",
    "linear_forward_reference",
    "load_config_file",
    "load_images",
    "load_model",
    "model_forward",
    "pack_weights",
    "parse_config_text",
    "quantize_activations",
    "quantize_model",
    "random_images",
    "random_model",
    "read_container",
    "run_selftest",
    "save_images",
    "save_model",
    "ssm_forward",
    "ssm_scan_oracle",
    "thread_count",
    "unpack_weights",
    "write_container",
]
