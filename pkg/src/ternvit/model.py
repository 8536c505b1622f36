"""Vision transformer with ternary linear layers.

Blocks are pre-norm residual::

    x = x + Attention(LayerNorm(x))
    x = x + Down(GELU(Up(LayerNorm(x))))

A learned class token is prepended to the patch embeddings, a learned
positional embedding is added, and the final-normed class-token row feeds
a linear head.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .attention import AttentionConfig, AttentionMode, AttentionWeights, attention_forward, attn_param_count
from .bf16 import round_bf16
from .errors import MissingTensorError, NonFiniteError, ShapeError
from .kernel import linear, weight_shape
from .packing import PackedWeightTiles, pack_ternary, packed_weight_bytes, unpack_ternary
from .quantize import DEFAULT_EPS, TernaryWeightMatrix, absmean_quantize
from .tensor import check_finite, gelu, layernorm, matmul_f32

TERNARY_ROLES = ("ffn", "attn_qkv", "attn_out")
COMPONENTS = ("patch_embed", "pos_embed", "attn_qkv", "attn_out", "ffn", "norms", "head")
PRECISIONS = ("f32", "bf16", "ternary")
BYTES_PER_PARAM = {"f32": 4, "bf16": 2}
SCALE_BYTES = 2  # one bf16 beta per ternary matrix


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 3
    heads: int = 8
    embed_dim: int = 512
    ffn_mult: int = 4
    patch_size: int = 16
    image_size: int = 224
    in_channels: int = 3
    num_classes: int = 9
    attn_mode: AttentionMode = AttentionMode.MQA
    ternary_layers: frozenset = frozenset({"ffn"})
    float_precision: str = "f32"
    pixel_mean: tuple | None = None
    pixel_std: tuple | None = None
    eps: float = DEFAULT_EPS
    ln_eps: float = 1e-5

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("attn_mode", AttentionMode(self.attn_mode))
        set_("ternary_layers", frozenset(self.ternary_layers))
        unknown = self.ternary_layers - set(TERNARY_ROLES)
        if unknown:
            raise ValueError(f"unknown ternary layer roles {sorted(unknown)}; choose from {TERNARY_ROLES}")
        if self.float_precision not in BYTES_PER_PARAM:
            raise ValueError(f"float_precision must be one of {tuple(BYTES_PER_PARAM)}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        for name in ("layers", "ffn_mult", "in_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        set_("pixel_mean", tuple(float(v) for v in (self.pixel_mean or (0.5,) * self.in_channels)))
        set_("pixel_std", tuple(float(v) for v in (self.pixel_std or (0.5,) * self.in_channels)))
        if len(self.pixel_mean) != self.in_channels or len(self.pixel_std) != self.in_channels:
            raise ValueError("pixel_mean/pixel_std need one entry per input channel")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.embed_dim

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.embed_dim, self.heads, self.attn_mode)


@dataclass
class BlockWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attn: AttentionWeights
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    ffn_up: Any
    ffn_down: Any


@dataclass
class ModelWeights:
    patch_embed: np.ndarray
    pos_embed: np.ndarray
    class_token: np.ndarray
    blocks: list = field(default_factory=list)
    norm_gain: np.ndarray | None = None
    norm_bias: np.ndarray | None = None
    head: np.ndarray | None = None
    head_bias: np.ndarray | None = None


# -- tensor naming -----------------------------------------------------------


def tensor_specs(cfg: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """Every tensor a model needs as ``(name, component, shape)``."""
    d, f, kv = cfg.embed_dim, cfg.ffn_dim, cfg.attention.kv_dim
    specs = [
        ("patch_embed", "patch_embed", (cfg.patch_dim, d)),
        ("pos_embed", "pos_embed", (cfg.tokens, d)),
        ("class_token", "pos_embed", (d,)),
    ]
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        specs += [
            (b + "ln1.gain", "norms", (d,)),
            (b + "ln1.bias", "norms", (d,)),
            (b + "attn.w_q", "attn_qkv", (d, d)),
            (b + "attn.w_k", "attn_qkv", (d, kv)),
            (b + "attn.w_v", "attn_qkv", (d, kv)),
            (b + "attn.w_o", "attn_out", (d, d)),
            (b + "ln2.gain", "norms", (d,)),
            (b + "ln2.bias", "norms", (d,)),
            (b + "ffn.up", "ffn", (d, f)),
            (b + "ffn.down", "ffn", (f, d)),
        ]
    specs += [
        ("norm.gain", "norms", (d,)),
        ("norm.bias", "norms", (d,)),
        ("head.weight", "head", (d, cfg.num_classes)),
        ("head.bias", "head", (cfg.num_classes,)),
    ]
    return specs


def to_tensor_dict(w: ModelWeights) -> dict[str, Any]:
    out = {"patch_embed": w.patch_embed, "pos_embed": w.pos_embed, "class_token": w.class_token}
    for i, blk in enumerate(w.blocks):
        b = f"blocks.{i}."
        out.update({
            b + "ln1.gain": blk.ln1_gain,
            b + "ln1.bias": blk.ln1_bias,
            b + "attn.w_q": blk.attn.w_q,
            b + "attn.w_k": blk.attn.w_k,
            b + "attn.w_v": blk.attn.w_v,
            b + "attn.w_o": blk.attn.w_o,
            b + "ln2.gain": blk.ln2_gain,
            b + "ln2.bias": blk.ln2_bias,
            b + "ffn.up": blk.ffn_up,
            b + "ffn.down": blk.ffn_down,
        })
    out.update({"norm.gain": w.norm_gain, "norm.bias": w.norm_bias,
                "head.weight": w.head, "head.bias": w.head_bias})
    return out


def from_tensor_dict(cfg: ModelConfig, tensors: dict[str, Any]) -> ModelWeights:
    """Assemble weights, checking every tensor's presence and shape."""
    for name, _, shape in tensor_specs(cfg):
        if name not in tensors:
            raise MissingTensorError(f"missing tensor {name!r}")
        got = weight_shape(tensors[name])
        if tuple(got) != shape:
            raise ShapeError(f"tensor {name!r} has shape {tuple(got)}, expected {shape}")
    t = tensors
    blocks = []
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        blocks.append(BlockWeights(
            ln1_gain=t[b + "ln1.gain"], ln1_bias=t[b + "ln1.bias"],
            attn=AttentionWeights(t[b + "attn.w_q"], t[b + "attn.w_k"], t[b + "attn.w_v"], t[b + "attn.w_o"]),
            ln2_gain=t[b + "ln2.gain"], ln2_bias=t[b + "ln2.bias"],
            ffn_up=t[b + "ffn.up"], ffn_down=t[b + "ffn.down"],
        ))
    return ModelWeights(
        patch_embed=t["patch_embed"], pos_embed=t["pos_embed"], class_token=t["class_token"],
        blocks=blocks, norm_gain=t["norm.gain"], norm_bias=t["norm.bias"],
        head=t["head.weight"], head_bias=t["head.bias"],
    )


# -- construction ------------------------------------------------------------


def init_weights(cfg: ModelConfig, seed: int = 0, std: float = 0.02, norm_jitter: float = 0.0) -> ModelWeights:
    """Random full-precision weights (normal init, unit layernorm gains).

    ``norm_jitter`` perturbs layernorm gains/biases, which is handy for tests
    that should not rely on the identity normalization.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, component, shape in tensor_specs(cfg):
        if component == "norms":
            base = 1.0 if name.endswith("gain") else 0.0
            arr = base + norm_jitter * rng.standard_normal(shape)
        elif name == "head.bias":
            arr = np.zeros(shape)
        else:
            arr = std * rng.standard_normal(shape)
        tensors[name] = arr.astype(np.float32)
    return from_tensor_dict(cfg, tensors)


def ternarize_weight(w, eps: float = DEFAULT_EPS) -> TernaryWeightMatrix:
    """Absmean ternarization with beta held at bfloat16 precision."""
    t = absmean_quantize(w, eps)
    return TernaryWeightMatrix(codes=t.codes, beta=np.float32(round_bf16(np.float32(t.beta))))


def quantize_weights(w: ModelWeights, cfg: ModelConfig, packed: bool = True) -> ModelWeights:
    """Replace float matrices in ``cfg.ternary_layers`` by ternary ones.

    Remaining float tensors are rounded to bfloat16 values when
    ``cfg.float_precision == "bf16"`` so that storage is lossless.
    """
    tensors = to_tensor_dict(w)
    for name, component, _ in tensor_specs(cfg):
        value = tensors[name]
        if component in cfg.ternary_layers:
            if isinstance(value, (TernaryWeightMatrix, PackedWeightTiles)):
                t = unpack_ternary(value) if isinstance(value, PackedWeightTiles) else value
            else:
                t = ternarize_weight(check_finite(np.asarray(value, np.float32), name), cfg.eps)
            tensors[name] = pack_ternary(t) if packed else t
        elif cfg.float_precision == "bf16":
            tensors[name] = round_bf16(check_finite(np.asarray(value, np.float32), name))
    return from_tensor_dict(cfg, tensors)


def unpack_weights(w: ModelWeights) -> ModelWeights:
    """Swap every packed layer for its unpacked ternary matrix."""
    blocks = []
    for blk in w.blocks:
        un = lambda x: unpack_ternary(x) if isinstance(x, PackedWeightTiles) else x  # noqa: E731
        blocks.append(replace(
            blk,
            attn=AttentionWeights(un(blk.attn.w_q), un(blk.attn.w_k), un(blk.attn.w_v), un(blk.attn.w_o)),
            ffn_up=un(blk.ffn_up), ffn_down=un(blk.ffn_down),
        ))
    return replace(w, blocks=blocks)


# -- forward -----------------------------------------------------------------


def patchify(image, cfg: ModelConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    s, p, c = cfg.image_size, cfg.patch_size, cfg.in_channels
    if img.shape != (s, s, c):
        raise ShapeError(f"image has shape {img.shape}, config expects {(s, s, c)}")
    g = s // p
    patches = img.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(patches.reshape(g * g, p * p * c))


def preprocess(image, cfg: ModelConfig) -> np.ndarray:
    """Standardize an image already scaled to [0, 1] with the config's pixel stats."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    mean = np.asarray(cfg.pixel_mean, dtype=np.float32)
    std = np.asarray(cfg.pixel_std, dtype=np.float32)
    return (img - mean) / std


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except NonFiniteError as e:
        raise NonFiniteError(f"{name}: {e}") from None


def block_forward(x: np.ndarray, blk: BlockWeights, cfg: ModelConfig, name: str = "block") -> np.ndarray:
    with _stage(f"{name}.attn"):
        h = layernorm(x, blk.ln1_gain, blk.ln1_bias, cfg.ln_eps)
        x = check_finite(x + attention_forward(h, blk.attn, cfg.attention, cfg.eps), "residual")
    with _stage(f"{name}.ffn"):
        h = layernorm(x, blk.ln2_gain, blk.ln2_bias, cfg.ln_eps)
        h = gelu(linear(h, blk.ffn_up, cfg.eps))
        x = check_finite(x + linear(h, blk.ffn_down, cfg.eps), "residual")
    return x


def embed(image, w: ModelWeights, cfg: ModelConfig) -> np.ndarray:
    with _stage("patch_embed"):
        x = matmul_f32(patchify(image, cfg), w.patch_embed)
        cls = np.asarray(w.class_token, dtype=np.float32).reshape(1, -1)
        x = np.concatenate([cls, x], axis=0) + np.asarray(w.pos_embed, dtype=np.float32)
        return check_finite(x, "embeddings")


def forward_features(image, w: ModelWeights, cfg: ModelConfig) -> np.ndarray:
    """Final-normed token matrix (tokens x embed_dim); row 0 is the class token."""
    if len(w.blocks) != cfg.layers:
        raise ShapeError(f"weights have {len(w.blocks)} blocks, config expects {cfg.layers}")
    x = embed(image, w, cfg)
    for i, blk in enumerate(w.blocks):
        x = block_forward(x, blk, cfg, f"blocks.{i}")
    with _stage("norm"):
        return layernorm(x, w.norm_gain, w.norm_bias, cfg.ln_eps)


def forward(image, w: ModelWeights, cfg: ModelConfig) -> np.ndarray:
    """Class logits (float32 vector of length ``num_classes``) for a preprocessed image."""
    x = forward_features(image, w, cfg)
    with _stage("head"):
        logits = matmul_f32(x[:1], w.head)[0] + np.asarray(w.head_bias, dtype=np.float32)
        return check_finite(logits, "logits")


# -- accounting --------------------------------------------------------------


def param_count(cfg: ModelConfig) -> dict[str, int]:
    """Exact parameter counts per component plus ``total``.

    ``pos_embed`` includes the class token; ``attention`` covers all four
    projections of every layer.
    """
    d, f, L = cfg.embed_dim, cfg.ffn_dim, cfg.layers
    counts = {
        "patch_embed": cfg.patch_dim * d,
        "pos_embed": cfg.tokens * d + d,
        "attention": L * attn_param_count(cfg.attention),
        "ffn": L * 2 * d * f,
        "norms": (2 * L + 1) * 2 * d,
        "head": d * cfg.num_classes + cfg.num_classes,
    }
    counts["total"] = sum(counts.values())
    return counts


def default_precision_map(cfg: ModelConfig) -> dict[str, str]:
    return {c: ("ternary" if c in cfg.ternary_layers else cfg.float_precision) for c in COMPONENTS}


def model_size_bytes(cfg: ModelConfig, precision_map: dict[str, str] | None = None) -> int:
    """Weight storage in bytes: packed words plus a 2-byte beta per ternary matrix."""
    pmap = default_precision_map(cfg) if precision_map is None else dict(precision_map)
    missing = set(COMPONENTS) - set(pmap)
    if missing:
        raise ValueError(f"precision map lacks components {sorted(missing)}")
    total = 0
    for name, component, shape in tensor_specs(cfg):
        tag = pmap[component]
        if tag == "ternary":
            if component not in TERNARY_ROLES:
                raise ValueError(f"component {component!r} cannot be stored ternary")
            k_in, n_out = shape
            total += packed_weight_bytes(n_out, k_in) + SCALE_BYTES
        elif tag in BYTES_PER_PARAM:
            total += BYTES_PER_PARAM[tag] * int(np.prod(shape))
        else:
            raise ValueError(f"unknown precision tag {tag!r}")
    return total


def operation_count(cfg: ModelConfig) -> dict[str, int]:
    """Multiply-accumulate counts per stage for one image; ``ops`` = 2 x total MACs."""
    t, d, f, dh, h = cfg.tokens, cfg.embed_dim, cfg.ffn_dim, cfg.attention.head_dim, cfg.heads
    kv = cfg.attention.kv_dim
    macs = {
        "patch_embed": cfg.num_patches * cfg.patch_dim * d,
        "attn_proj": cfg.layers * t * d * (2 * d + 2 * kv),
        "attn_scores": cfg.layers * 2 * h * t * t * dh,
        "ffn": cfg.layers * 2 * t * d * f,
        "head": d * cfg.num_classes,
    }
    macs["total_macs"] = sum(macs.values())
    macs["ops"] = 2 * macs["total_macs"]
    return macs
