"""bfloat16 storage helpers (values stay float32 in memory)."""

import numpy as np


def to_bf16_bits(x) -> np.ndarray:
    """High 16 bits of each float32, rounded to nearest with ties to even."""
    u = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def from_bf16_bits(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return b.view(np.float32)


def round_bf16(x) -> np.ndarray:
    return from_bf16_bits(to_bf16_bits(x)).reshape(np.shape(x))
