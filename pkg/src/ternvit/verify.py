"""Self-check suites run by ``ternvit verify``.

Each suite yields ``Check`` results; a suite never raises on a failed
property, it reports it. Random inputs come from fixed seeds.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model_io
from .attention import AttentionConfig, AttentionWeights, attn_param_count, kv_param_count, mhsa_forward, mqa_forward
from .distill import DistillWeights, FeatureProjection, cross_entropy, distill_loss, feature_loss, kd_divergence
from .errors import CorruptPackedDataError
from .kernel import TileGeometry, TrafficCounter, gemm_packed_blocked, gemm_reference
from .model import ModelConfig, forward, init_weights, quantize_weights, unpack_weights
from .packing import ZERO_WORD, PackedWeightTiles, pack_ternary, packed_weight_bytes, unpack_ternary
from .quantize import TernaryWeightMatrix, absmax_quantize, absmean_quantize, bitlinear_forward, dequantize
from .tensor import read_ften

SUITES = ("quantize", "pack", "gemm", "attention", "model", "distill")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _check(suite, name, fn) -> Check:
    try:
        out = fn()
    except Exception as e:  # a crash is a failed property, reported by name
        return Check(suite, name, False, f"{type(e).__name__}: {e}")
    if isinstance(out, tuple):
        return Check(suite, name, bool(out[0]), out[1])
    return Check(suite, name, bool(out))


def _random_ternary(rng, k, n) -> TernaryWeightMatrix:
    return TernaryWeightMatrix(rng.integers(-1, 2, (k, n)).astype(np.int8), np.float32(rng.random() + 0.1))


def suite_quantize(rng, cases: int = 1000) -> list[Check]:
    def ranges():
        for _ in range(cases):
            shape = tuple(int(x) for x in rng.integers(1, 40, 2))
            w = (rng.standard_normal(shape) * rng.uniform(0.01, 10)).astype(np.float32)
            t = absmean_quantize(w)
            beta = np.mean(np.abs(w.astype(np.float64)))
            if not set(np.unique(t.codes)) <= {-1, 0, 1} or abs(t.beta - beta) > 1e-6 * beta:
                return False, f"weights of shape {shape}"
            q = absmax_quantize(w)
            gamma = np.abs(w.astype(np.float64)).max(axis=1) / 127
            if q.values.min() < -128 or q.values.max() > 127 or np.any(np.abs(q.gamma - gamma) > 1e-6 * gamma):
                return False, f"activations of shape {shape}"
        return True, f"{cases} random matrices"

    def worked():
        t = absmean_quantize(np.array([[0.2, -0.9, 0.5]], np.float32))
        q = absmax_quantize(np.array([[-2.0, 1.0, 4.0]], np.float32), eps=1e-12)
        return t.codes.tolist() == [[0, -1, 1]] and q.values.tolist() == [[-64, 32, 127]]

    def composition():
        a = rng.standard_normal((2, 16)).astype(np.float32)
        t = _random_ternary(rng, 16, 8)
        q = absmax_quantize(a)
        expect = dequantize(q.values.astype(np.int64) @ t.codes.astype(np.int64), q.gamma, t.beta)
        return np.array_equal(bitlinear_forward(a, t), expect)

    return [_check("quantize", "code and scale ranges", ranges),
            _check("quantize", "worked examples", worked),
            _check("quantize", "bitlinear == dequantize . int_matmul . absmax", composition)]


def suite_pack(rng, cases: int = 1000) -> list[Check]:
    def roundtrip():
        shapes = [(33, 17), (1, 1), (2048, 512)] + [tuple(int(x) for x in rng.integers(1, 100, 2)) for _ in range(cases)]
        for k, n in shapes:
            t = _random_ternary(rng, k, n)
            if not np.array_equal(unpack_ternary(pack_ternary(t)).codes, t.codes):
                return False, f"shape {(k, n)}"
        return True, f"{len(shapes)} shapes"

    def zero_tile():
        p = pack_ternary(TernaryWeightMatrix(np.zeros((16, 32), np.int8), np.float32(0)))
        return bool(np.all(p.words == ZERO_WORD))

    def reserved():
        p = PackedWeightTiles(32, 16, np.full(32, 0xFFFFFFFF, np.uint32), np.float32(1))
        try:
            unpack_ternary(p)
        except CorruptPackedDataError:
            return True
        return False

    def density():
        return packed_weight_bytes(2048, 512) == 262144 and 4 * 2048 * 512 / packed_weight_bytes(2048, 512) == 16.0

    return [_check("pack", "round trip", roundtrip), _check("pack", "zero tile words", zero_tile),
            _check("pack", "reserved pattern rejected", reserved), _check("pack", "16x byte ratio", density)]


def suite_gemm(rng, cases: int = 1000) -> list[Check]:
    def oracle():
        for i in range(cases):
            m, k, n = (int(x) for x in rng.integers(1, rng.choice([17, 65, 257]), 3))
            t = _random_ternary(rng, k, n)
            a = rng.integers(-128, 128, (m, k)).astype(np.int8)
            geom = TileGeometry(int(rng.choice([1, 4, 8, 16])))
            workers = int(rng.integers(1, 5))
            got = gemm_packed_blocked(a, pack_ternary(t), geom, workers=workers, schedule_seed=i)
            if not np.array_equal(got, gemm_reference(a, t)):
                return False, f"case {i}: {(m, k, n)} m_block={geom.m_block} workers={workers}"
        return True, f"{cases} random shapes"

    def ffn_shapes():
        for m, k, n in ((197, 512, 2048), (197, 2048, 512)):
            t = _random_ternary(rng, k, n)
            a = rng.integers(-128, 128, (m, k)).astype(np.int8)
            if not np.array_equal(gemm_packed_blocked(a, pack_ternary(t)), gemm_reference(a, t)):
                return False, f"shape {(m, k, n)}"
        return True

    def traffic():
        t = _random_ternary(rng, 2048, 512)
        c = TrafficCounter()
        a = rng.integers(-128, 128, (8, 2048)).astype(np.int8)
        gemm_packed_blocked(a, pack_ternary(t), counter=c, workers=1)
        return c.weight_bytes_read == packed_weight_bytes(512, 2048) == 262144, f"{c.weight_bytes_read} bytes"

    return [_check("gemm", "packed blocked == reference", oracle),
            _check("gemm", "FFN shapes packed == reference", ffn_shapes), _check("gemm", "single-pass weight traffic", traffic)]


def suite_attention(rng) -> list[Check]:
    def equivalence():
        for _ in range(100):
            h = int(rng.choice([1, 2, 4, 8]))
            d = h * int(rng.integers(1, 9))
            tokens = int(rng.integers(1, 17))
            x = rng.standard_normal((tokens, d)).astype(np.float32)
            wq, wo = (rng.standard_normal((d, d)).astype(np.float32) for _ in range(2))
            wk, wv = (rng.standard_normal((d, d // h)).astype(np.float32) for _ in range(2))
            mqa = mqa_forward(x, AttentionWeights(wq, wk, wv, wo), AttentionConfig(d, h, "mqa"))
            rep = AttentionWeights(wq, np.tile(wk, (1, h)), np.tile(wv, (1, h)), wo)
            if not np.array_equal(mqa, mhsa_forward(x, rep, AttentionConfig(d, h, "mhsa"))):
                return False, f"D={d} H={h} tokens={tokens}"
        return True, "100 random inputs"

    def counts():
        mh, mq = AttentionConfig(512, 8, "mhsa"), AttentionConfig(512, 8, "mqa")
        ok = kv_param_count(mh) == 524288 and kv_param_count(mq) == 65536
        return ok and attn_param_count(mh) - attn_param_count(mq) == 458752

    return [_check("attention", "MQA == MHSA with replicated K/V", equivalence),
            _check("attention", "parameter accounting", counts)]


def _tiny_config(rng) -> ModelConfig:
    heads = int(rng.choice([1, 2, 4]))
    return ModelConfig(
        layers=int(rng.integers(1, 3)), heads=heads, embed_dim=heads * int(rng.choice([4, 8])),
        ffn_mult=int(rng.choice([2, 4])), patch_size=2, image_size=int(rng.choice([4, 6])),
        in_channels=int(rng.choice([1, 3])), num_classes=int(rng.integers(2, 6)),
        attn_mode=str(rng.choice(["mhsa", "mqa"])),
        ternary_layers=frozenset(r for r in ("ffn", "attn_qkv", "attn_out") if rng.random() < 0.7) | {"ffn"},
    )


def check_model_consistency(weights, cfg: ModelConfig, image) -> tuple[bool, str]:
    packed = forward(image, weights, cfg)
    unpacked = forward(image, unpack_weights(weights), cfg)
    return np.array_equal(packed, unpacked), f"logits {packed}"


def suite_model(rng, model_path=None) -> list[Check]:
    def consistency():
        for i in range(20):
            cfg = _tiny_config(rng)
            w = quantize_weights(init_weights(cfg, seed=i, std=0.3, norm_jitter=0.1), cfg)
            img = rng.random((cfg.image_size, cfg.image_size, cfg.in_channels)).astype(np.float32)
            ok, detail = check_model_consistency(w, cfg, img)
            if not ok:
                return False, f"model {i}: {detail}"
        return True, "20 random tiny models"

    def roundtrip():
        cfg = _tiny_config(rng)
        w = quantize_weights(init_weights(cfg, seed=7, std=0.3), cfg)
        img = rng.random((cfg.image_size, cfg.image_size, cfg.in_channels)).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "m.bmvc"
            model_io.save(w, cfg, path)
            w2, cfg2 = model_io.load(path)
        return cfg2 == cfg and np.array_equal(forward(img, w, cfg), forward(img, w2, cfg2))

    checks = [_check("model", "packed == unpacked ternary forward", consistency),
              _check("model", "save/load round trip", roundtrip)]
    if model_path is not None:
        def fixture():
            w, cfg = model_io.load(model_path)
            img = rng.random((cfg.image_size, cfg.image_size, cfg.in_channels)).astype(np.float32)
            return check_model_consistency(w, cfg, img)

        checks.append(_check("model", f"fixture {Path(model_path).name}", fixture))
    return checks


DISTILL_FIXTURES = ("student_logits", "teacher_logits", "label", "student_feat", "teacher_feat",
                    "projection", "weights", "expected")


def check_distill_fixture(directory) -> tuple[bool, str]:
    """Recompute losses from FTEN fixtures and compare with ``expected.ften``.

    ``weights.ften`` holds (lambda_cls, lambda_logits, lambda_feat, T) and
    ``expected.ften`` holds (ce, kd, feat, total).
    """
    d = Path(directory)
    f = {name: read_ften(d / f"{name}.ften") for name in DISTILL_FIXTURES}
    lam = f["weights"].ravel()
    w = DistillWeights(*(float(x) for x in lam))
    got = distill_loss(f["student_logits"], f["teacher_logits"], int(f["label"].ravel()[0]),
                       f["student_feat"], f["teacher_feat"], FeatureProjection(f["projection"]), w)
    expected = dict(zip(("ce", "kd", "feat", "total"), f["expected"].ravel().tolist()))
    bad = [k for k in expected if not math.isclose(got[k], expected[k], rel_tol=1e-5, abs_tol=1e-5)]
    return not bad, ("mismatch in " + ", ".join(bad)) if bad else "fixture losses match"


def suite_distill(rng, fixture_dir=None) -> list[Check]:
    def closed_forms():
        ce = cross_entropy([math.log(3), 0.0], 1)
        kd = kd_divergence([0.0, 0.0], [math.log(3), 0.0], 1.0)
        feat = feature_loss([[1.0, 2.0]], [[2.0, 4.0]], FeatureProjection.identity(2))
        return (abs(ce - math.log(4)) < 1e-5 and abs(kd - (0.75 * math.log(1.5) + 0.25 * math.log(0.5))) < 1e-5
                and abs(feat - 2.5) < 1e-5)

    def kd_props():
        for _ in range(1000):
            c = int(rng.integers(2, 12))
            s, t = rng.standard_normal(c) * 3, rng.standard_normal(c) * 3
            temp = float(rng.uniform(0.5, 4))
            if kd_divergence(s, t, temp) < 0 or kd_divergence(s, s, temp) != 0.0:
                return False
        return True, "1000 random pairs"

    def uniform_ce():
        return all(abs(cross_entropy(np.zeros(c), 0) - math.log(c)) < 1e-6 for c in (2, 9, 11))

    checks = [_check("distill", "closed-form values", closed_forms),
              _check("distill", "kd non-negative, zero on identical logits", kd_props),
              _check("distill", "uniform cross-entropy == ln C", uniform_ce)]
    if fixture_dir is not None:
        checks.append(_check("distill", f"fixture {Path(fixture_dir).name}",
                             lambda: check_distill_fixture(fixture_dir)))
    return checks


def run_suites(names=SUITES, seed: int = 0, model_path=None, distill_dir=None) -> list[Check]:
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        if name == "quantize":
            results += suite_quantize(rng)
        elif name == "pack":
            results += suite_pack(rng)
        elif name == "gemm":
            results += suite_gemm(rng)
        elif name == "attention":
            results += suite_attention(rng)
        elif name == "model":
            results += suite_model(rng, model_path)
        elif name == "distill":
            results += suite_distill(rng, distill_dir)
        else:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return results

