"""Scaled dot-product attention with multi-head and multi-query projections.

Projection weights multiply from the right (``x @ w``). Head ``h`` of a
D x D projection owns columns ``h*d_h:(h+1)*d_h``. In multi-query mode the
key/value projections are D x d_h and shared by every head.

Any projection may be a float matrix, a ``TernaryWeightMatrix`` or a
``PackedWeightTiles``; see :func:`ternvit.kernel.linear`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ShapeError
from .kernel import linear, weight_shape
from .quantize import DEFAULT_EPS
from .tensor import as_matrix, matmul_f32, softmax_rows


class AttentionMode(str, enum.Enum):
    MHSA = "mhsa"
    MQA = "mqa"


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    heads: int
    mode: AttentionMode = AttentionMode.MQA

    def __post_init__(self):
        object.__setattr__(self, "mode", AttentionMode(self.mode))
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim if self.mode is AttentionMode.MQA else self.embed_dim


@dataclass(frozen=True)
class AttentionWeights:
    w_q: Any
    w_k: Any
    w_v: Any
    w_o: Any

    def check(self, cfg: AttentionConfig) -> None:
        d, kv = cfg.embed_dim, cfg.kv_dim
        expected = {"w_q": (d, d), "w_k": (d, kv), "w_v": (d, kv), "w_o": (d, d)}
        for name, shape in expected.items():
            got = tuple(weight_shape(getattr(self, name)))
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, {cfg.mode.value} needs {shape}")


def scaled_dot_attention(q, k, v) -> np.ndarray:
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible q{q.shape}, k{k.shape}, v{v.shape}")
    scores = matmul_f32(q, np.ascontiguousarray(k.T)) / np.float32(math.sqrt(q.shape[1]))
    return matmul_f32(softmax_rows(scores), v)


def _heads_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: AttentionConfig, shared: bool):
    dh = cfg.head_dim
    outs = []
    for h in range(cfg.heads):
        cols = slice(h * dh, (h + 1) * dh)
        kh = k if shared else k[:, cols]
        vh = v if shared else v[:, cols]
        outs.append(scaled_dot_attention(q[:, cols], kh, vh))
    return np.concatenate(outs, axis=1)


def mhsa_forward(x, w: AttentionWeights, cfg: AttentionConfig, eps: float = DEFAULT_EPS) -> np.ndarray:
    if cfg.mode is not AttentionMode.MHSA:
        raise ValueError("mhsa_forward needs an MHSA config")
    x = as_matrix(x, "x")
    if x.shape[1] != cfg.embed_dim:
        raise ShapeError(f"input has {x.shape[1]} features, expected {cfg.embed_dim}")
    w.check(cfg)
    q, k, v = linear(x, w.w_q, eps), linear(x, w.w_k, eps), linear(x, w.w_v, eps)
    return linear(_heads_attend(q, k, v, cfg, shared=False), w.w_o, eps)


def mqa_forward(x, w: AttentionWeights, cfg: AttentionConfig, eps: float = DEFAULT_EPS) -> np.ndarray:
    if cfg.mode is not AttentionMode.MQA:
        raise ValueError("mqa_forward needs an MQA config")
    x = as_matrix(x, "x")
    if x.shape[1] != cfg.embed_dim:
        raise ShapeError(f"input has {x.shape[1]} features, expected {cfg.embed_dim}")
    w.check(cfg)
    q = linear(x, w.w_q, eps)
    k_sh, v_sh = linear(x, w.w_k, eps), linear(x, w.w_v, eps)
    return linear(_heads_attend(q, k_sh, v_sh, cfg, shared=True), w.w_o, eps)


def attention_forward(x, w: AttentionWeights, cfg: AttentionConfig, eps: float = DEFAULT_EPS) -> np.ndarray:
    if cfg.mode is AttentionMode.MQA:
        return mqa_forward(x, w, cfg, eps)
    return mhsa_forward(x, w, cfg, eps)


def attn_param_count(cfg: AttentionConfig) -> int:
    d, dh, h = cfg.embed_dim, cfg.head_dim, cfg.heads
    if cfg.mode is AttentionMode.MHSA:
        return 4 * d * dh * h
    return 2 * d * dh * h + 2 * d * dh


def kv_param_count(cfg: AttentionConfig) -> int:
    """Parameters in the key and value projections alone."""
    return 2 * cfg.embed_dim * cfg.kv_dim
