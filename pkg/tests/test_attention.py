import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ternvit.attention import (
    AttentionConfig,
    AttentionWeights,
    attention_forward,
    attn_param_count,
    kv_param_count,
    mhsa_forward,
    mqa_forward,
    scaled_dot_attention,
)
from ternvit.errors import ShapeError
from ternvit.packing import pack_ternary
from ternvit.quantize import absmean_quantize
from ternvit.tensor import softmax_rows


def kmm(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), np.float32)
    for k in range(a.shape[1]):
        out = out + a[:, k:k + 1] * b[k:k + 1, :]
    return out


def loop_attention(x, w, heads, shared):
    """Per-head loop oracle built from a k-ascending float32 product."""
    d = x.shape[1]
    dh = d // heads
    q, k, v = kmm(x, w.w_q), kmm(x, w.w_k), kmm(x, w.w_v)
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        kh, vh = (k, v) if shared else (k[:, cols], v[:, cols])
        scores = kmm(q[:, cols], np.ascontiguousarray(kh.T)) / np.float32(math.sqrt(dh))
        outs.append(kmm(softmax_rows(scores), vh))
    return kmm(np.concatenate(outs, axis=1), w.w_o)


def random_weights(rng, d, heads, mode):
    kv = d if mode == "mhsa" else d // heads
    f = lambda *s: rng.standard_normal(s).astype(np.float32)  # noqa: E731
    return AttentionWeights(f(d, d), f(d, kv), f(d, kv), f(d, d))


def test_mhsa_matches_loop_oracle(rng):
    x = rng.standard_normal((4, 8)).astype(np.float32)
    w = random_weights(rng, 8, 2, "mhsa")
    assert np.array_equal(mhsa_forward(x, w, AttentionConfig(8, 2, "mhsa")), loop_attention(x, w, 2, False))


def test_mqa_matches_loop_oracle(rng):
    x = rng.standard_normal((4, 16)).astype(np.float32)
    w = random_weights(rng, 16, 4, "mqa")
    assert np.array_equal(mqa_forward(x, w, AttentionConfig(16, 4, "mqa")), loop_attention(x, w, 4, True))


def test_single_head_is_plain_attention(rng):
    x = rng.standard_normal((5, 6)).astype(np.float32)
    w = random_weights(rng, 6, 1, "mhsa")
    single = scaled_dot_attention(kmm(x, w.w_q), kmm(x, w.w_k), kmm(x, w.w_v))
    assert np.array_equal(mhsa_forward(x, w, AttentionConfig(6, 1, "mhsa")), kmm(single, w.w_o))


def test_scaled_dot_attention_uniform_scores():
    v = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    out = scaled_dot_attention(np.zeros((3, 2)), np.zeros((2, 2)), v)
    assert np.allclose(out, [[2.0, 3.0]] * 3)


@given(heads=st.sampled_from([1, 2, 4, 8]), dh=st.integers(1, 8), tokens=st.integers(1, 16),
       seed=st.integers(0, 2 ** 31))
def test_mqa_equals_mhsa_with_replicated_kv(heads, dh, tokens, seed):
    rng = np.random.default_rng(seed)
    d = heads * dh
    x = rng.standard_normal((tokens, d)).astype(np.float32)
    w = random_weights(rng, d, heads, "mqa")
    rep = AttentionWeights(w.w_q, np.tile(w.w_k, (1, heads)), np.tile(w.w_v, (1, heads)), w.w_o)
    assert np.array_equal(mqa_forward(x, w, AttentionConfig(d, heads, "mqa")),
                          mhsa_forward(x, rep, AttentionConfig(d, heads, "mhsa")))


def test_mqa_equals_mhsa_with_ternary_projections(rng):
    d, heads = 32, 4
    x = rng.standard_normal((7, d)).astype(np.float32)
    wq, wo = (pack_ternary(absmean_quantize(rng.standard_normal((d, d)))) for _ in range(2))
    wk, wv = (rng.standard_normal((d, d // heads)).astype(np.float32) for _ in range(2))
    mqa = mqa_forward(x, AttentionWeights(wq, wk, wv, wo), AttentionConfig(d, heads, "mqa"))
    rep = AttentionWeights(wq, np.tile(wk, (1, heads)), np.tile(wv, (1, heads)), wo)
    assert np.array_equal(mqa, mhsa_forward(x, rep, AttentionConfig(d, heads, "mhsa")))


def test_param_counts_at_default_width():
    mh, mq = AttentionConfig(512, 8, "mhsa"), AttentionConfig(512, 8, "mqa")
    assert kv_param_count(mh) == 524288
    assert kv_param_count(mq) == 65536
    assert kv_param_count(mh) // kv_param_count(mq) == 8
    assert attn_param_count(mh) == 4 * 512 * 512
    assert attn_param_count(mh) - attn_param_count(mq) == 458752


@given(heads=st.integers(1, 16), dh=st.integers(1, 64))
def test_kv_reduction_is_head_count(heads, dh):
    d = heads * dh
    assert kv_param_count(AttentionConfig(d, heads, "mhsa")) == heads * kv_param_count(AttentionConfig(d, heads, "mqa"))


def test_config_and_shape_errors(rng):
    with pytest.raises(ValueError):
        AttentionConfig(10, 3)
    cfg = AttentionConfig(8, 2, "mqa")
    w = random_weights(rng, 8, 2, "mhsa")
    with pytest.raises(ShapeError):
        mqa_forward(np.zeros((3, 8)), w, cfg)
    with pytest.raises(ShapeError):
        attention_forward(np.zeros((3, 6)), random_weights(rng, 8, 2, "mqa"), cfg)
    with pytest.raises(ValueError):
        mhsa_forward(np.zeros((3, 8)), w, cfg)
