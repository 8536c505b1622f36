"""Kernel and end-to-end timing with analytic byte accounting.

Byte counts are a model of what each kernel fetches, not hardware counters:

* packed     packed words once per output tile pass (from ``TrafficCounter``)
* reference  unpack-per-use: every output row re-fetches every packed word,
             every output element re-reads its int8 activation row
* float      f32 weights and activations, each read once

``gops_per_s`` is ``ops / nanoseconds``. For GEMM rows ``ops = 2*M*N*K``;
for full-model rows it is the analytic count of one forward pass and
M/N/K report tokens, embedding width and FFN width.
"""

from __future__ import annotations

import csv
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from .kernel import (
    THREADS_ENV,
    TileGeometry,
    TrafficCounter,
    default_workers,
    gemm_packed_blocked,
    gemm_unpack_per_use,
    physical_cores,
    unpack_per_use_weight_bytes,
)
from .model import (
    ModelConfig,
    forward,
    init_weights,
    model_size_bytes,
    operation_count,
    param_count,
    quantize_weights,
    tensor_specs,
)
from .packing import pack_ternary, unpack_ternary
from .quantize import absmax_quantize, absmean_quantize
from .tensor import matmul_f32

CSV_VERSION = 1
WORKLOADS = ("ffn-kn", "ffn-nk", "full-model")
KERNELS = ("packed", "reference", "float")


@dataclass
class BenchRow:
    workload: str
    M: int
    N: int
    K: int
    kernel: str
    threads: int
    ops: int
    nanoseconds: int
    gops_per_s: float
    weight_bytes: int
    activation_bytes: int
    speedup_vs_reference: float | None = None


FIELDS = list(BenchRow.__dataclass_fields__)


def median_ns(fn, repeats: int, warmup: int = 1) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def ffn_shape(workload: str, cfg: ModelConfig) -> tuple[int, int, int]:
    """(M, N, K) of the two FFN projections for the config's token count."""
    if workload == "ffn-kn":
        return cfg.tokens, cfg.ffn_dim, cfg.embed_dim
    if workload == "ffn-nk":
        return cfg.tokens, cfg.embed_dim, cfg.ffn_dim
    raise ValueError(f"{workload!r} is not an FFN workload")


def thread_counts(override: int | None = None) -> list[int]:
    if override is not None:
        return [override]
    return sorted({1, default_workers()})


def bench_gemm(workload: str, m: int, n: int, k: int, repeats: int, threads: int,
               seed: int = 0, m_block: int = 8) -> list[BenchRow]:
    rng = np.random.default_rng(seed)
    t = absmean_quantize(rng.standard_normal((k, n)).astype(np.float32))
    p = pack_ternary(t)
    a = rng.standard_normal((m, k)).astype(np.float32)
    q = absmax_quantize(a)
    geom = TileGeometry(m_block)

    counter = TrafficCounter()
    packed_out = gemm_packed_blocked(q, p, geom, counter, workers=threads)
    ref_out = gemm_unpack_per_use(q, p, workers=threads)
    if not np.array_equal(packed_out, ref_out):
        raise AssertionError(f"{workload}: packed and reference kernels disagree")

    timings = {
        "packed": median_ns(lambda: gemm_packed_blocked(q, p, geom, workers=threads), repeats),
        "reference": median_ns(lambda: gemm_unpack_per_use(q, p, workers=threads), repeats),
        "float": median_ns(lambda: matmul_f32(a, unpack_ternary(p).to_float()), repeats),
    }
    traffic = {
        "packed": (counter.weight_bytes_read, counter.activation_bytes_read),
        "reference": (unpack_per_use_weight_bytes(m, n, k), m * n * k),
        "float": (4 * n * k, 4 * m * k),
    }
    ops = 2 * m * n * k
    rows = []
    for kernel in KERNELS:
        ns = timings[kernel]
        rows.append(BenchRow(
            workload=workload, M=m, N=n, K=k, kernel=kernel, threads=threads, ops=ops, nanoseconds=ns,
            gops_per_s=ops / ns, weight_bytes=traffic[kernel][0], activation_bytes=traffic[kernel][1],
            speedup_vs_reference=timings["reference"] / ns,
        ))
    return rows


def _model_activation_bytes(cfg: ModelConfig, ternary: bool) -> int:
    """Bytes of linear-layer inputs for one image: 1 per element into ternary layers, 4 otherwise."""
    total = 0
    for _, component, shape in tensor_specs(cfg):
        if len(shape) != 2 or component not in ("patch_embed", "attn_qkv", "attn_out", "ffn", "head"):
            continue
        rows = 1 if component == "head" else (cfg.num_patches if component == "patch_embed" else cfg.tokens)
        width = 1 if (ternary and component in cfg.ternary_layers) else 4
        total += rows * shape[0] * width
    return total


def bench_model(cfg: ModelConfig, repeats: int, threads: int, seed: int = 0) -> list[BenchRow]:
    weights = init_weights(cfg, seed)
    packed = quantize_weights(weights, cfg)
    image = np.random.default_rng(seed).random((cfg.image_size, cfg.image_size, cfg.in_channels),
                                               dtype=np.float32)
    ops = operation_count(cfg)["ops"]
    prev = os.environ.get(THREADS_ENV)
    os.environ[THREADS_ENV] = str(threads)
    try:
        ns_packed = median_ns(lambda: forward(image, packed, cfg), repeats)
        ns_float = median_ns(lambda: forward(image, weights, cfg), repeats)
    finally:
        if prev is None:
            os.environ.pop(THREADS_ENV, None)
        else:
            os.environ[THREADS_ENV] = prev
    float_bytes = 4 * param_count(cfg)["total"]
    dims = (cfg.tokens, cfg.embed_dim, cfg.ffn_dim)
    return [
        BenchRow("full-model", *dims, "packed", threads, ops, ns_packed,
                 ops / ns_packed, model_size_bytes(cfg), _model_activation_bytes(cfg, True)),
        BenchRow("full-model", *dims, "float", threads, ops, ns_float,
                 ops / ns_float, float_bytes, _model_activation_bytes(cfg, False)),
    ]


def run(workloads, cfg: ModelConfig | None = None, repeats: int = 30, threads: int | None = None,
        seed: int = 0) -> list[BenchRow]:
    cfg = cfg or ModelConfig()
    rows = []
    for n_threads in thread_counts(threads):
        for wl in workloads:
            if wl == "full-model":
                rows += bench_model(cfg, repeats, n_threads, seed)
            else:
                m, n, k = ffn_shape(wl, cfg)
                rows += bench_gemm(wl, m, n, k, repeats, n_threads, seed)
    return rows


def write_csv(rows, out=None) -> None:
    out = out or sys.stdout
    out.write(f"# ternvit-bench-csv v{CSV_VERSION}; physical_cores={physical_cores()}\n")
    writer = csv.DictWriter(out, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        d = asdict(r)
        d["gops_per_s"] = f"{r.gops_per_s:.4f}"
        d["speedup_vs_reference"] = "" if r.speedup_vs_reference is None else f"{r.speedup_vs_reference:.3f}"
        writer.writerow(d)
