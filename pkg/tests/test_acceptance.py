"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the report lines.
"""

import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from ternvit import bench, model_io
from ternvit.attention import AttentionConfig, AttentionWeights, attn_param_count, kv_param_count, mhsa_forward, mqa_forward
from ternvit.distill import FeatureProjection, cross_entropy, feature_loss, kd_divergence, total_loss, DistillWeights
from ternvit.kernel import TileGeometry, TrafficCounter, gemm_packed_blocked, gemm_reference, physical_cores
from ternvit.model import ModelConfig, forward, init_weights, model_size_bytes, param_count, quantize_weights, unpack_weights
from ternvit.packing import ZERO_WORD, pack_ternary, packed_weight_bytes, unpack_ternary
from ternvit.quantize import TernaryWeightMatrix, absmax_quantize, absmean_quantize


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def random_ternary(rng, k, n):
    return TernaryWeightMatrix(rng.integers(-1, 2, (k, n)).astype(np.int8), np.float32(rng.random() + 0.01))


def test_criterion_01_quantization(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_beta = worst_gamma = 0.0
    codes_ok = values_ok = True
    for _ in range(1000):
        shape = tuple(int(x) for x in rng.integers(1, 64, 2))
        w = (rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)).astype(np.float32)
        t = absmean_quantize(w)
        beta = np.mean(np.abs(w.astype(np.float64)))
        worst_beta = max(worst_beta, abs(float(t.beta) - beta) / beta)
        codes_ok &= bool(np.isin(t.codes, (-1, 0, 1)).all())
        q = absmax_quantize(w)
        gamma = np.abs(w.astype(np.float64)).max(axis=1) / 127
        worst_gamma = max(worst_gamma, float(np.max(np.abs(q.gamma - gamma) / gamma)))
        values_ok &= bool(q.values.min() >= -128 and q.values.max() <= 127)
    example = absmean_quantize(np.array([[0.2, -0.9, 0.5]], np.float32)).codes.tolist()
    elapsed = time.perf_counter() - t0
    ok = (codes_ok and values_ok and worst_beta <= 1e-6 and worst_gamma <= 1e-6
          and example == [[0, -1, 1]] and elapsed < 5)
    report(1, ok, f"1000 matrices, max rel err beta {worst_beta:.1e} gamma {worst_gamma:.1e}, "
                  f"worked example {example}, {elapsed:.2f}s")


def test_criterion_02_pack_round_trip(report):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    shapes = [(33, 17), (1, 1), (2048, 512)] + [tuple(int(x) for x in rng.integers(1, 130, 2)) for _ in range(1000)]
    failures = [s for s in shapes
                if not np.array_equal(unpack_ternary(pack_ternary(t := random_ternary(rng, *s))).codes, t.codes)]
    zero = pack_ternary(TernaryWeightMatrix(np.zeros((16, 32), np.int8), np.float32(0))).words
    zero_ok = zero.size == 32 and bool(np.all(zero == 0x55555555)) and ZERO_WORD == 0x55555555
    elapsed = time.perf_counter() - t0
    report(2, not failures and zero_ok and elapsed < 5,
           f"{len(shapes)} matrices, {len(failures)} mismatches, zero tile -> 0x{int(zero[0]):08X}, {elapsed:.2f}s")


def test_criterion_03_kernel_oracle(report):
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    mismatches = []
    for i in range(1000):
        m, k, n = (int(x) for x in rng.integers(1, 257, 3))
        m_block = int(rng.choice([1, 2, 4, 8, 16, 32]))
        workers = int(rng.integers(1, 9))
        t = random_ternary(rng, k, n)
        a = rng.integers(-128, 128, (m, k)).astype(np.int8)
        got = gemm_packed_blocked(a, pack_ternary(t), TileGeometry(m_block), workers=workers, schedule_seed=i)
        if not np.array_equal(got, gemm_reference(a, t)):
            mismatches.append((m, k, n, m_block, workers))
    for m, k, n in ((197, 512, 2048), (197, 2048, 512)):
        t = random_ternary(rng, k, n)
        a = rng.integers(-128, 128, (m, k)).astype(np.int8)
        if not np.array_equal(gemm_packed_blocked(a, pack_ternary(t)), gemm_reference(a, t)):
            mismatches.append((m, k, n, 8, None))
    elapsed = time.perf_counter() - t0
    report(3, not mismatches and elapsed < 60,
           f"1000 random + 2 FFN shapes, {len(mismatches)} mismatches {mismatches[:3]}, {elapsed:.2f}s")


def test_criterion_04_kv_accounting(report):
    mh, mq = AttentionConfig(512, 8, "mhsa"), AttentionConfig(512, 8, "mqa")
    kv_mh, kv_mq = kv_param_count(mh), kv_param_count(mq)
    ok = (kv_mh, kv_mq) == (524288, 65536) and kv_mh == 8 * kv_mq
    ok &= attn_param_count(mh) - attn_param_count(mq) == kv_mh - kv_mq
    report(4, ok, f"K+V params MHSA {kv_mh}, MQA {kv_mq}, ratio {kv_mh // kv_mq}")


def test_criterion_05_model_accounting(report):
    cfg = ModelConfig()
    params = param_count(cfg)["total"]
    size = model_size_bytes(cfg)
    p_err, s_err = params / 8.65e6 - 1, size / 10.5e6 - 1
    report(5, abs(p_err) <= 0.05 and abs(s_err) <= 0.10,
           f"params {params:,} ({p_err:+.2%} vs 8.65M), size {size:,} B ({s_err:+.2%} vs 10.5MB)")


def test_criterion_06_traffic(report):
    rng = np.random.default_rng(106)
    results = []
    for m, k, n in ((197, 512, 2048), (197, 2048, 512), (64, 256, 256)):
        counter = TrafficCounter()
        a = rng.integers(-128, 128, (m, k)).astype(np.int8)
        gemm_packed_blocked(a, pack_ternary(random_ternary(rng, k, n)), counter=counter, workers=1)
        results.append((counter.weight_bytes_read, packed_weight_bytes(n, k), 4 * k * n / packed_weight_bytes(n, k)))
    ok = all(got == expect and ratio == 16.0 for got, expect, ratio in results)
    report(6, ok, "counted == packed bytes, f32/packed ratio: "
                  + ", ".join(f"{g}=={e} ({r})" for g, e, r in results))


def test_criterion_07_mqa_equivalence(report):
    rng = np.random.default_rng(107)
    bad = 0
    for _ in range(100):
        heads = int(rng.choice([1, 2, 4, 8]))
        d = heads * int(rng.integers(1, 64 // heads + 1))
        tokens = int(rng.integers(1, 17))
        x = rng.standard_normal((tokens, d)).astype(np.float32)
        wq, wo = (rng.standard_normal((d, d)).astype(np.float32) for _ in range(2))
        wk, wv = (rng.standard_normal((d, d // heads)).astype(np.float32) for _ in range(2))
        mqa = mqa_forward(x, AttentionWeights(wq, wk, wv, wo), AttentionConfig(d, heads, "mqa"))
        mhsa = mhsa_forward(x, AttentionWeights(wq, np.tile(wk, (1, heads)), np.tile(wv, (1, heads)), wo),
                            AttentionConfig(d, heads, "mhsa"))
        bad += not np.array_equal(mqa, mhsa)
    report(7, bad == 0, f"100 random inputs, {bad} bitwise mismatches")


def test_criterion_08_end_to_end(report):
    rng = np.random.default_rng(108)
    bad_models, bad_round_trips = 0, 0
    with tempfile.TemporaryDirectory() as d:
        for i in range(20):
            heads = int(rng.choice([1, 2, 4]))
            cfg = ModelConfig(
                layers=int(rng.integers(1, 3)), heads=heads, embed_dim=heads * int(rng.choice([4, 8])),
                ffn_mult=int(rng.choice([2, 4])), patch_size=2, image_size=int(rng.choice([4, 6])),
                in_channels=int(rng.choice([1, 3])), num_classes=int(rng.integers(2, 11)),
                attn_mode=str(rng.choice(["mhsa", "mqa"])),
                ternary_layers={"ffn"} | {r for r in ("attn_qkv", "attn_out") if rng.random() < 0.5},
                float_precision=str(rng.choice(["f32", "bf16"])),
            )
            w = quantize_weights(init_weights(cfg, seed=i, std=0.3, norm_jitter=0.1), cfg)
            img = rng.random((cfg.image_size, cfg.image_size, cfg.in_channels)).astype(np.float32)
            logits = forward(img, w, cfg)
            bad_models += not np.array_equal(logits, forward(img, unpack_weights(w), cfg))
            path = Path(d) / f"m{i}.bmvc"
            model_io.save(w, cfg, path)
            w2, cfg2 = model_io.load(path)
            bad_round_trips += not (cfg2 == cfg and np.array_equal(logits, forward(img, w2, cfg2)))
    report(8, bad_models == 0 and bad_round_trips == 0,
           f"20 tiny models: {bad_models} packed/unpacked mismatches, {bad_round_trips} save/load mismatches")


def test_criterion_09_losses(report):
    rng = np.random.default_rng(109)
    temps = (0.5, 1.0, 2.0, 4.0)
    identity_ok = all(kd_divergence(x, x, t) == 0.0 for t in temps for x in rng.standard_normal((25, 7)) * 5)
    worst_kd = min(kd_divergence(rng.standard_normal(c) * 4, rng.standard_normal(c) * 4, float(rng.uniform(0.5, 4)))
                   for c in rng.integers(2, 12, 1000))
    ce_err = max(abs(cross_entropy(np.zeros(c), 0) - math.log(c)) for c in (2, 9, 11))
    ce = cross_entropy([math.log(3), 0.0], 1)
    kd = kd_divergence([0.0, 0.0], [math.log(3), 0.0], 1.0)
    feat = feature_loss([[1.0, 2.0]], [[2.0, 4.0]], FeatureProjection.identity(2))
    closed = [(ce, math.log(4)), (kd, 0.75 * math.log(1.5) + 0.25 * math.log(0.5)), (feat, 2.5),
              (total_loss(ce, kd, feat, DistillWeights()), math.log(4) + 0.75 * math.log(1.5)
               + 0.25 * math.log(0.5) + 2.5)]
    closed_err = max(abs(got - want) for got, want in closed)
    ok = identity_ok and worst_kd >= 0 and ce_err <= 1e-6 and closed_err <= 1e-5
    report(9, ok, f"kd(x,x)==0: {identity_ok}, min kd over 1000 pairs {worst_kd:.3e}, "
                  f"uniform CE err {ce_err:.1e}, closed-form err {closed_err:.1e}")


def test_criterion_10_packed_beats_reference(report):
    cfg = ModelConfig()
    threads = physical_cores()
    speedups = {}
    for wl in ("ffn-kn", "ffn-nk"):
        rows = bench.bench_gemm(wl, *bench.ffn_shape(wl, cfg), repeats=5, threads=threads)
        speedups[wl] = next(r.speedup_vs_reference for r in rows if r.kernel == "packed")
    report(10, all(s > 1.0 for s in speedups.values()),
           f"packed vs unpack-per-use at {threads} thread(s): "
           + ", ".join(f"{wl} {s:.2f}x" for wl, s in speedups.items())
           + "; accuracy, device latency, throughput and power figures are out of scope")
