"""W2A8 quantization: absmean ternary weights, absmax int8 activations.

Weights ``W`` are k x n (input depth by output channels) and activations
``A`` are m x k, so a layer computes ``A @ W``. Both quantizers use
round-to-nearest with ties away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _jit
from .bf16 import round_bf16
from .errors import ShapeError
from .tensor import as_matrix, check_finite

DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class TernaryWeightMatrix:
    codes: np.ndarray  # int8, (k, n), values in {-1, 0, 1}
    beta: np.float32

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    def to_float(self) -> np.ndarray:
        """Dequantized weights ``codes * beta``."""
        return self.codes.astype(np.float32) * np.float32(self.beta)


@dataclass(frozen=True)
class QuantizedActivationMatrix:
    values: np.ndarray  # int8, (m, k)
    gamma: np.ndarray  # float32, (m,)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def round_half_away(x: np.ndarray) -> np.ndarray:
    t = np.trunc(x)
    frac = x - t  # exact in binary floating point
    return t + np.sign(x) * (np.abs(frac) >= 0.5)


def absmean_quantize(w, eps: float = DEFAULT_EPS) -> TernaryWeightMatrix:
    w = check_finite(as_matrix(w, "weights"), "weights")
    if w.size == 0:
        raise ShapeError("cannot quantize an empty weight matrix")
    if eps <= 0:
        raise ValueError("eps must be positive")
    beta = np.float32(np.mean(np.abs(w), dtype=np.float64))
    scaled = w / (beta + np.float32(eps))
    codes = np.clip(round_half_away(scaled), -1, 1).astype(np.int8)
    return TernaryWeightMatrix(codes=codes, beta=beta)


def absmax_quantize(a, eps: float = DEFAULT_EPS, bf16_scales: bool = False) -> QuantizedActivationMatrix:
    """Per-row int8 quantization with ``gamma[i] = max|a[i]| / 127``.

    With ``bf16_scales`` the row scales are rounded to bfloat16 before use,
    which models a device that keeps scales in 16-bit registers.
    """
    a = check_finite(as_matrix(a, "activations"), "activations")
    if a.size == 0:
        raise ShapeError("cannot quantize an empty activation matrix")
    if eps <= 0:
        raise ValueError("eps must be positive")
    gamma = np.abs(a).max(axis=1) / np.float32(127.0)
    if bf16_scales:
        gamma = round_bf16(gamma)
    scaled = a / (gamma[:, None] + np.float32(eps))
    values = np.clip(round_half_away(scaled), -128, 127).astype(np.int8)
    return QuantizedActivationMatrix(values=values, gamma=gamma.astype(np.float32))


def int_matmul(values: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Exact int8 x ternary product accumulated in int32."""
    values = np.ascontiguousarray(values, dtype=np.int8)
    codes = np.ascontiguousarray(codes, dtype=np.int8)
    if values.ndim != 2 or codes.ndim != 2 or values.shape[1] != codes.shape[0]:
        raise ShapeError(f"cannot multiply {values.shape} by {codes.shape}")
    out = np.zeros((values.shape[0], codes.shape[1]), dtype=np.int32)
    _jit.int_matmul(values, codes, out)
    return out


def dequantize(acc, gamma, beta) -> np.ndarray:
    acc = np.asarray(acc)
    gamma = np.asarray(gamma, dtype=np.float32).ravel()
    if acc.ndim != 2 or gamma.shape[0] != acc.shape[0]:
        raise ShapeError(f"gamma of length {gamma.shape[0]} for {acc.shape[0]} accumulator rows")
    return acc.astype(np.float32) * gamma[:, None] * np.float32(beta)


def bitlinear_forward(a, w: TernaryWeightMatrix, eps: float = DEFAULT_EPS) -> np.ndarray:
    a = as_matrix(a, "activations")
    if a.shape[1] != w.rows:
        raise ShapeError(f"activations have {a.shape[1]} columns, weights have {w.rows} rows")
    q = absmax_quantize(a, eps)
    return dequantize(int_matmul(q.values, w.codes), q.gamma, w.beta)
