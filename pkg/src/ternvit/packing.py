"""2-bit packing of ternary weights into 32x16 column-major fragments.

Encoding per code: -1 -> 0b00, 0 -> 0b01, +1 -> 0b10; 0b11 is invalid, so a
field decodes as ``field - 1``.

Word layout for a weight of ``k_in`` rows (K) by ``n_out`` columns (N)::

    n_tiles = ceil(n_out / 32), n_slabs = ceil(k_in / 16)
    word[(slab * n_tiles + tile) * 32 + j]   holds column n = tile*32 + j,
                                             rows k = slab*16 .. slab*16+15,
                                             row slab*16+i at bits (2i, 2i+1)

Ragged dimensions are padded with code 0, which adds nothing to a dot
product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptPackedDataError, ShapeError
from .quantize import TernaryWeightMatrix

TILE_N = 32
TILE_K = 16
ZERO_WORD = 0x55555555

_SHIFTS = (2 * np.arange(TILE_K, dtype=np.uint32)).astype(np.uint32)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class PackedWeightTiles:
    n_out: int
    k_in: int
    words: np.ndarray  # uint32
    beta: np.float32

    tile_n = TILE_N
    tile_k = TILE_K

    def __post_init__(self):
        if self.n_out < 1 or self.k_in < 1:
            raise ShapeError(f"packed weights need positive dims, got n_out={self.n_out}, k_in={self.k_in}")
        expected = self.n_tiles * self.n_slabs * TILE_N
        if self.words.ndim != 1 or self.words.size != expected:
            raise ShapeError(f"{self.words.size} packed words for {self.k_in}x{self.n_out}, expected {expected}")

    @property
    def n_tiles(self) -> int:
        return _ceil_div(self.n_out, TILE_N)

    @property
    def n_slabs(self) -> int:
        return _ceil_div(self.k_in, TILE_K)

    @property
    def nbytes(self) -> int:
        return int(self.words.size) * 4


def packed_weight_bytes(n_out: int, k_in: int) -> int:
    if n_out <= 0 or k_in <= 0:
        raise ValueError("dimensions must be positive")
    return 4 * _ceil_div(n_out, TILE_N) * _ceil_div(k_in, TILE_K) * TILE_N


def pack_ternary(t: TernaryWeightMatrix) -> PackedWeightTiles:
    codes = np.asarray(t.codes)
    if codes.ndim != 2 or codes.size == 0:
        raise ShapeError(f"cannot pack codes of shape {codes.shape}")
    if np.any((codes < -1) | (codes > 1)):
        raise ValueError("ternary codes must lie in {-1, 0, 1}")
    k_in, n_out = codes.shape
    n_slabs = _ceil_div(k_in, TILE_K)
    n_tiles = _ceil_div(n_out, TILE_N)
    fields = np.ones((n_slabs * TILE_K, n_tiles * TILE_N), dtype=np.uint32)
    fields[:k_in, :n_out] = (codes + 1).astype(np.uint32)
    # (slab, k_local, tile, j) -> (slab, tile, j, k_local)
    fields = fields.reshape(n_slabs, TILE_K, n_tiles, TILE_N).transpose(0, 2, 3, 1)
    words = np.bitwise_or.reduce(fields << _SHIFTS, axis=-1).astype(np.uint32)
    return PackedWeightTiles(
        n_out=n_out, k_in=k_in, words=np.ascontiguousarray(words.ravel()), beta=np.float32(t.beta)
    )


def check_words(words: np.ndarray) -> None:
    fields = (np.asarray(words, dtype=np.uint32)[:, None] >> _SHIFTS) & np.uint32(3)
    bad = np.nonzero(np.any(fields == 3, axis=1))[0]
    if bad.size:
        raise CorruptPackedDataError(
            f"reserved 2-bit pattern 0b11 in {bad.size} packed word(s), first at index {bad[0]}"
        )


def unpack_ternary(p: PackedWeightTiles) -> TernaryWeightMatrix:
    n_slabs, n_tiles = p.n_slabs, p.n_tiles
    words = np.asarray(p.words, dtype=np.uint32)
    if words.size != n_slabs * n_tiles * TILE_N:
        raise ShapeError(
            f"{words.size} packed words cannot hold a {p.k_in}x{p.n_out} weight"
        )
    fields = (words.reshape(n_slabs, n_tiles, TILE_N, 1) >> _SHIFTS) & np.uint32(3)
    if np.any(fields == 3):
        check_words(words)
    codes = fields.astype(np.int8) - 1
    codes = codes.transpose(0, 3, 1, 2).reshape(n_slabs * TILE_K, n_tiles * TILE_N)
    return TernaryWeightMatrix(
        codes=np.ascontiguousarray(codes[: p.k_in, : p.n_out]), beta=np.float32(p.beta)
    )
