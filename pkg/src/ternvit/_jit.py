"""Compiled inner loops.

Everything here is numba-jitted and releases the GIL so callers can drive
tiles from a thread pool. The public modules wrap these with validation.
Summation order inside every loop nest is k-ascending per output element.
"""

import numba
import numpy as np

TILE_N = 32
TILE_K = 16


@numba.njit(nogil=True, cache=True)
def matmul_f32(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for kk in range(k):
            aik = a[i, kk]
            for j in range(n):
                out[i, j] += aik * b[kk, j]


@numba.njit(nogil=True, cache=True)
def int_matmul(a, codes, out):
    m, k = a.shape
    n = codes.shape[1]
    for i in range(m):
        for kk in range(k):
            aik = np.int32(a[i, kk])
            for j in range(n):
                out[i, j] += aik * np.int32(codes[kk, j])


@numba.njit(nogil=True, cache=True)
def blocked_tiles(a, words, k_in, n_tiles, n_slabs, m_block,
                  item_tile, item_lo, item_hi, items, scratch, out, stats):
    """Run the listed work items of the blocked packed GEMM.

    A work item is one output-channel tile (32 columns) over one contiguous
    row range. For each K slab the item decodes its 32x16 fragment once into
    a scratch tile and streams every m_block of its rows against it.

    ``scratch`` is a caller-owned (16, 32) int32 buffer, one per thread.
    stats[item] = (words loaded, activation bytes loaded, corrupt flag).
    """
    # Trip count read from a runtime shape: a literal 32 gets fully unrolled
    # and loses vectorization.
    tn = scratch.shape[1]
    for idx in range(items.shape[0]):
        item = items[idx]
        t = item_tile[item]
        lo = item_lo[item]
        hi = item_hi[item]
        acc = np.zeros((hi - lo, TILE_N), np.int32)
        n_words = 0
        n_act = 0
        bad = 0
        for s in range(n_slabs):
            base = (s * n_tiles + t) * TILE_N
            for j in range(TILE_N):
                w = words[base + j]
                for kk in range(TILE_K):
                    field = np.int32((w >> np.uint32(2 * kk)) & np.uint32(3))
                    if field == 3:
                        bad = 1
                    scratch[kk, j] = field - 1
            n_words += TILE_N
            k0 = s * TILE_K
            kw = min(TILE_K, k_in - k0)
            for mb in range(lo, hi, m_block):
                me = min(mb + m_block, hi)
                n_act += (me - mb) * kw
                for i in range(mb, me):
                    r = i - lo
                    for kk in range(kw):
                        av = np.int32(a[i, k0 + kk])
                        for j in range(tn):
                            acc[r, j] += av * scratch[kk, j]
        c0 = t * TILE_N
        for r in range(hi - lo):
            for j in range(TILE_N):
                out[lo + r, c0 + j] = acc[r, j]
        stats[item, 0] = n_words
        stats[item, 1] = n_act
        stats[item, 2] = bad


@numba.njit(nogil=True, cache=True)
def unpack_per_use(a, words, n_out, k_in, n_tiles, row_lo, row_hi, out):
    """Naive GEMM that decodes the packed word for every multiply-accumulate.

    Returns 1 if a reserved bit pattern was seen, else 0.
    """
    bad = 0
    for i in range(row_lo, row_hi):
        for n in range(n_out):
            t = n // TILE_N
            j = n - t * TILE_N
            acc = np.int32(0)
            for k in range(k_in):
                s = k // TILE_K
                kk = k - s * TILE_K
                w = words[(s * n_tiles + t) * TILE_N + j]
                field = np.int32((w >> np.uint32(2 * kk)) & np.uint32(3))
                if field == 3:
                    bad = 1
                acc += np.int32(a[i, k]) * (field - 1)
            out[i, n] = acc
    return bad
