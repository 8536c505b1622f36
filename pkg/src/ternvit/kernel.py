"""Integer GEMM over packed ternary weights.

``gemm_packed_blocked`` is the production path. It splits the output into a
grid of work items (32-column output tiles x row groups). Each item walks
the K slabs in order, decodes its 32x16 weight fragment once into a scratch
tile and reuses it for every ``m_block`` rows it owns. Items run on a
thread pool; the compiled loops release the GIL. Every output element is
written by exactly one item and accumulated in k-ascending order, so the
result does not depend on scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _jit
from .errors import CorruptPackedDataError, ShapeError
from .packing import TILE_K, TILE_N, PackedWeightTiles, check_words, packed_weight_bytes
from .quantize import (
    DEFAULT_EPS,
    QuantizedActivationMatrix,
    TernaryWeightMatrix,
    absmax_quantize,
    bitlinear_forward,
    dequantize,
    int_matmul,
)
from .tensor import as_matrix, matmul_f32

THREADS_ENV = "TERNVIT_NUM_THREADS"


def physical_cores() -> int:
    try:
        import psutil

        n = psutil.cpu_count(logical=False)
    except Exception:  # pragma: no cover - psutil missing or unsupported platform
        n = None
    return n or os.cpu_count() or 1


def default_workers() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return physical_cores()


@dataclass(frozen=True)
class TileGeometry:
    m_block: int = 8
    n_block: int = TILE_N
    k_block: int = TILE_K

    def __post_init__(self):
        if self.m_block < 1:
            raise ValueError("m_block must be at least 1")
        if (self.n_block, self.k_block) != (TILE_N, TILE_K):
            raise ValueError(f"n_block/k_block are fixed at {TILE_N}/{TILE_K} by the packing layout")


@dataclass
class TrafficCounter:
    weight_bytes_read: int = 0
    activation_bytes_read: int = 0
    output_bytes_written: int = 0

    def add(self, weight: int = 0, activation: int = 0, output: int = 0) -> None:
        self.weight_bytes_read += int(weight)
        self.activation_bytes_read += int(activation)
        self.output_bytes_written += int(output)


def _activation_values(a) -> np.ndarray:
    values = a.values if isinstance(a, QuantizedActivationMatrix) else a
    values = np.ascontiguousarray(values, dtype=np.int8)
    if values.ndim != 2:
        raise ShapeError(f"activations must be 2-D, got {values.shape}")
    return values


def gemm_reference(a, t: TernaryWeightMatrix) -> np.ndarray:
    """Plain triple-loop int8 x ternary product (the oracle for the packed kernels)."""
    values = _activation_values(a)
    if values.shape[1] != t.rows:
        raise ShapeError(f"activations have {values.shape[1]} columns, weights have {t.rows} rows")
    return int_matmul(values, t.codes)


def _run_parallel(fn, chunks, workers: int) -> list:
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _work_grid(m: int, n_tiles: int, m_block: int, workers: int, m_groups: int | None):
    m_blocks = max(1, -(-m // m_block))
    if m_groups is None:
        m_groups = 1 if n_tiles >= workers else -(-workers // n_tiles)
    m_groups = max(1, min(m_groups, m_blocks))
    blocks_per_group = -(-m_blocks // m_groups)
    tiles, los, his = [], [], []
    for t in range(n_tiles):
        for g in range(m_groups):
            lo = g * blocks_per_group * m_block
            hi = min(m, lo + blocks_per_group * m_block)
            if lo < hi:
                tiles.append(t)
                los.append(lo)
                his.append(hi)
    as_i64 = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
    return as_i64(tiles), as_i64(los), as_i64(his)


def gemm_packed_blocked(
    a,
    p: PackedWeightTiles,
    geom: TileGeometry | None = None,
    counter: TrafficCounter | None = None,
    *,
    workers: int | None = None,
    m_groups: int | None = None,
    schedule_seed: int | None = None,
) -> np.ndarray:
    """Blocked GEMM of int8 activations (m x k) against packed weights (k x n).

    ``workers`` threads pull work items; ``m_groups`` splits rows of each
    output tile into that many items (default: only as many as needed to
    keep the workers busy, so each fragment is usually decoded once).
    ``schedule_seed`` shuffles the order items are handed out.
    """
    geom = geom or TileGeometry()
    values = _activation_values(a)
    if values.shape[1] != p.k_in:
        raise ShapeError(f"activations have {values.shape[1]} columns, packed weights have k_in={p.k_in}")
    words = np.ascontiguousarray(p.words, dtype=np.uint32)
    n_tiles, n_slabs = p.n_tiles, p.n_slabs
    if words.size != n_tiles * n_slabs * TILE_N:
        raise ShapeError(f"{words.size} packed words cannot hold a {p.k_in}x{p.n_out} weight")
    m = values.shape[0]
    workers = default_workers() if workers is None else max(1, int(workers))

    item_tile, item_lo, item_hi = _work_grid(m, n_tiles, geom.m_block, workers, m_groups)
    n_items = item_tile.size
    order = np.arange(n_items, dtype=np.int64)
    if schedule_seed is not None:
        np.random.default_rng(schedule_seed).shuffle(order)
    chunks = [order[w::workers] for w in range(min(workers, n_items))]

    out = np.zeros((m, n_tiles * TILE_N), dtype=np.int32)
    stats = np.zeros((n_items, 3), dtype=np.int64)

    def run(items):
        _jit.blocked_tiles(values, words, p.k_in, n_tiles, n_slabs, geom.m_block,
                           item_tile, item_lo, item_hi, items,
                           np.empty((TILE_K, TILE_N), dtype=np.int32), out, stats)

    _run_parallel(run, chunks, workers)
    if stats[:, 2].any():
        check_words(words)
        raise CorruptPackedDataError("reserved 2-bit pattern in packed weights")
    if counter is not None:
        counter.add(
            weight=4 * int(stats[:, 0].sum()),
            activation=int(stats[:, 1].sum()),
            output=4 * m * p.n_out,
        )
    return np.ascontiguousarray(out[:, : p.n_out])


def gemm_unpack_per_use(a, p: PackedWeightTiles, *, workers: int | None = None) -> np.ndarray:
    """Naive baseline: decode the packed word again for every multiply-accumulate."""
    values = _activation_values(a)
    if values.shape[1] != p.k_in:
        raise ShapeError(f"activations have {values.shape[1]} columns, packed weights have k_in={p.k_in}")
    words = np.ascontiguousarray(p.words, dtype=np.uint32)
    m = values.shape[0]
    workers = default_workers() if workers is None else max(1, int(workers))
    bounds = np.linspace(0, m, min(workers, max(m, 1)) + 1).astype(int)
    out = np.zeros((m, p.n_out), dtype=np.int32)

    def run(span):
        return _jit.unpack_per_use(values, words, p.n_out, p.k_in, p.n_tiles, span[0], span[1], out)

    flags = _run_parallel(run, list(zip(bounds[:-1], bounds[1:])), workers)
    if any(flags):
        check_words(words)
    return out


def unpack_per_use_weight_bytes(m: int, n_out: int, k_in: int) -> int:
    """Weight bytes the naive kernel fetches: every row re-reads every packed word."""
    return m * packed_weight_bytes(n_out, k_in)


def bitlinear_forward_packed(
    a,
    p: PackedWeightTiles,
    eps: float = DEFAULT_EPS,
    geom: TileGeometry | None = None,
    counter: TrafficCounter | None = None,
    *,
    workers: int | None = None,
) -> np.ndarray:
    a = as_matrix(a, "activations")
    if a.shape[1] != p.k_in:
        raise ShapeError(f"activations have {a.shape[1]} columns, packed weights have k_in={p.k_in}")
    q = absmax_quantize(a, eps)
    acc = gemm_packed_blocked(q, p, geom, counter, workers=workers)
    return dequantize(acc, q.gamma, p.beta)


def linear(x, w, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Apply a weight that may be float, unpacked ternary or packed ternary."""
    if isinstance(w, PackedWeightTiles):
        return bitlinear_forward_packed(x, w, eps)
    if isinstance(w, TernaryWeightMatrix):
        return bitlinear_forward(x, w, eps)
    return matmul_f32(x, w)


def weight_shape(w) -> tuple[int, int]:
    """(rows, cols) of a float, ternary or packed weight as used in ``x @ w``."""
    if isinstance(w, PackedWeightTiles):
        return (w.k_in, w.n_out)
    if isinstance(w, TernaryWeightMatrix):
        return w.codes.shape
    return tuple(np.shape(w))
