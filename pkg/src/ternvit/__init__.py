"""Ternary-weight (W2A8) vision transformer inference on the CPU."""

from .attention import AttentionConfig, AttentionMode, AttentionWeights, attention_forward, mhsa_forward, mqa_forward
from .kernel import TileGeometry, TrafficCounter, gemm_packed_blocked, gemm_reference, gemm_unpack_per_use
from .model import ModelConfig, forward, init_weights, model_size_bytes, param_count, quantize_weights
from .model_io import convert, load, save
from .packing import PackedWeightTiles, pack_ternary, packed_weight_bytes, unpack_ternary
from .quantize import TernaryWeightMatrix, QuantizedActivationMatrix, absmax_quantize, absmean_quantize

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "AttentionMode", "AttentionWeights", "attention_forward", "mhsa_forward", "mqa_forward",
    "TileGeometry", "TrafficCounter", "gemm_packed_blocked", "gemm_reference", "gemm_unpack_per_use",
    "ModelConfig", "forward", "init_weights", "model_size_bytes", "param_count", "quantize_weights",
    "convert", "load", "save",
    "PackedWeightTiles", "pack_ternary", "packed_weight_bytes", "unpack_ternary",
    "TernaryWeightMatrix", "QuantizedActivationMatrix", "absmax_quantize", "absmean_quantize",
]
