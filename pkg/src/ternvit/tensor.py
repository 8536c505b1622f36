"""Dense float32 matrix helpers and the FTEN tensor file format.

Matrices are plain 2-D ``np.float32`` arrays in row-major order. Every op
here rejects NaN/Inf on input and output.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import _jit
from .errors import NonFiniteError, ShapeError, TensorFileError

FTEN_MAGIC = b"FTEN"
FTEN_VERSION = 1


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def softmax_rows(m) -> np.ndarray:
    m = check_finite(as_matrix(m), "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layernorm(m, gain, bias, eps: float = 1e-5) -> np.ndarray:
    m = check_finite(as_matrix(m), "layernorm input")
    gain = np.asarray(gain, dtype=np.float32).ravel()
    bias = np.asarray(bias, dtype=np.float32).ravel()
    if gain.shape[0] != m.shape[1] or bias.shape[0] != m.shape[1]:
        raise ShapeError(
            f"layernorm params of length {gain.shape[0]}/{bias.shape[0]} "
            f"do not match {m.shape[1]} columns"
        )
    mean = m.mean(axis=1, keepdims=True)
    centered = m - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    out = centered / np.sqrt(var + np.float32(eps)) * gain + bias
    return check_finite(out, "layernorm output")


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(m) -> np.ndarray:
    """Tanh-approximation GELU, elementwise."""
    x = check_finite(np.asarray(m, dtype=np.float32), "gelu input")
    with np.errstate(over="ignore"):
        inner = _GELU_C * (x + _GELU_A * x * x * x)
    out = np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))
    return check_finite(out, "gelu output")


def matmul_f32(a, b) -> np.ndarray:
    """Reference float32 matmul with a fixed k-ascending summation order.

    Each output element depends only on its own row of ``a`` and column of
    ``b``, so slicing columns of ``b`` never changes the bits of a result.
    """
    a = check_finite(as_matrix(a, "lhs"), "matmul lhs")
    b = check_finite(as_matrix(b, "rhs"), "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    _jit.matmul_f32(a, b, out)
    return check_finite(out, "matmul output")


# -- FTEN files --------------------------------------------------------------


def write_ften(path, array) -> None:
    arr = np.asarray(array, dtype="<f4")  # keeps 0-d scalars 0-d; tobytes() is C order
    header = FTEN_MAGIC + struct.pack("<II", FTEN_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_ften(path) -> np.ndarray:
    data = Path(path).read_bytes()
    return parse_ften(data, str(path))


def parse_ften(data: bytes, where: str = "<bytes>") -> np.ndarray:
    if len(data) < 12 or data[:4] != FTEN_MAGIC:
        raise TensorFileError(f"{where}: not an FTEN tensor file")
    version, ndims = struct.unpack_from("<II", data, 4)
    if version != FTEN_VERSION:
        raise TensorFileError(f"{where}: unsupported FTEN version {version}")
    dims_end = 12 + 8 * ndims
    if len(data) < dims_end:
        raise TensorFileError(f"{where}: truncated dimension list")
    dims = struct.unpack_from(f"<{ndims}Q", data, 12)
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    if len(data) != dims_end + 4 * count:
        raise TensorFileError(
            f"{where}: payload is {len(data) - dims_end} bytes, expected {4 * count}"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=dims_end, count=count)
    return arr.astype(np.float32).reshape(dims)
