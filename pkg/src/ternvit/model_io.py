"""The ``.bmvc`` model container and float -> ternary conversion.

Layout (little-endian throughout)::

    header    magic "BMVC", u32 version, u32 header_bytes,
              u32 layers, heads, embed_dim, ffn_mult, patch_size, image_size,
                  in_channels, num_classes,
              u8 attn_mode (0 mhsa, 1 mqa), u8 ternary role bitmask
                  (1 ffn, 2 attn_qkv, 4 attn_out), u8 float precision
                  (0 f32, 1 bf16), u8 reserved,
              f64 eps, f64 ln_eps,
              f64 pixel_mean[in_channels], f64 pixel_std[in_channels],
              u32 section_count, u64 payload_offset
    table     per section: u16 name_len, name (utf-8), u8 component,
              u8 precision (0 f32, 1 bf16, 2 ternary), u8 ndims,
              u32 dims[ndims], u64 offset, u64 length
    payload   sections back to back in table order, no padding

A ternary section is the packed word array exactly as the kernel consumes
it (see :mod:`ternvit.packing`) followed by beta as one bfloat16. Its dims
are the logical (k_in, n_out) weight shape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attention import AttentionMode
from .bf16 import from_bf16_bits, to_bf16_bits
from .errors import (
    BadMagicError,
    ContainerError,
    CorruptPackedDataError,
    CorruptTernaryError,
    MissingTensorError,
    NonFiniteError,
    SectionOverlapError,
    ShapeError,
    TruncatedContainerError,
    VersionMismatchError,
)
from .model import (
    COMPONENTS,
    TERNARY_ROLES,
    ModelConfig,
    ModelWeights,
    from_tensor_dict,
    quantize_weights,
    tensor_specs,
    to_tensor_dict,
)
from .packing import PackedWeightTiles, check_words, pack_ternary, packed_weight_bytes
from .quantize import TernaryWeightMatrix
from .tensor import read_ften

MAGIC = b"BMVC"
FORMAT_VERSION = 1

_PRECISION_CODES = {"f32": 0, "bf16": 1, "ternary": 2}
_PRECISION_NAMES = {v: k for k, v in _PRECISION_CODES.items()}
_ROLE_BITS = {"ffn": 1, "attn_qkv": 2, "attn_out": 4}
_MODE_CODES = {AttentionMode.MHSA: 0, AttentionMode.MQA: 1}

_FIXED = struct.Struct("<4sII8IBBBBdd")
_TAIL = struct.Struct("<IQ")


@dataclass(frozen=True)
class Section:
    name: str
    component: str
    precision: str
    dims: tuple[int, ...]
    offset: int
    length: int


def _encode_header(cfg: ModelConfig, n_sections: int, header_bytes: int, payload_offset: int) -> bytes:
    mask = sum(_ROLE_BITS[r] for r in cfg.ternary_layers)
    fixed = _FIXED.pack(
        MAGIC, FORMAT_VERSION, header_bytes,
        cfg.layers, cfg.heads, cfg.embed_dim, cfg.ffn_mult, cfg.patch_size, cfg.image_size,
        cfg.in_channels, cfg.num_classes,
        _MODE_CODES[cfg.attn_mode], mask, _PRECISION_CODES[cfg.float_precision], 0,
        cfg.eps, cfg.ln_eps,
    )
    c = cfg.in_channels
    stats = struct.pack(f"<{c}d{c}d", *cfg.pixel_mean, *cfg.pixel_std)
    return fixed + stats + _TAIL.pack(n_sections, payload_offset)


def _encode_entry(s: Section) -> bytes:
    name = s.name.encode("utf-8")
    return (
        struct.pack("<H", len(name)) + name
        + struct.pack("<BBB", COMPONENTS.index(s.component), _PRECISION_CODES[s.precision], len(s.dims))
        + struct.pack(f"<{len(s.dims)}I", *s.dims)
        + struct.pack("<QQ", s.offset, s.length)
    )


def _tensor_payload(name: str, value, precision: str) -> bytes:
    if precision == "ternary":
        if isinstance(value, TernaryWeightMatrix):
            value = pack_ternary(value)
        if not isinstance(value, PackedWeightTiles):
            raise ShapeError(f"tensor {name!r} must be ternary for this config; run convert first")
        words = np.ascontiguousarray(value.words, dtype="<u4")
        beta = to_bf16_bits(np.float32(value.beta)).astype("<u2")
        return words.tobytes() + beta.tobytes()
    if isinstance(value, (TernaryWeightMatrix, PackedWeightTiles)):
        raise ShapeError(f"tensor {name!r} is ternary but its component is stored as {precision}")
    arr = np.asarray(value, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in tensor {name!r}")
    if precision == "bf16":
        return to_bf16_bits(arr).astype("<u2").tobytes()
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _precision_for(cfg: ModelConfig, component: str) -> str:
    return "ternary" if component in cfg.ternary_layers else cfg.float_precision


def save(weights: ModelWeights, cfg: ModelConfig, path) -> None:
    """Write a container. bf16 sections and betas are rounded to nearest even."""
    tensors = to_tensor_dict(weights)
    from_tensor_dict(cfg, tensors)  # shape check
    specs = tensor_specs(cfg)
    payloads, sections = [], []
    for name, component, shape in specs:
        precision = _precision_for(cfg, component)
        payloads.append(_tensor_payload(name, tensors[name], precision))
        sections.append(Section(name, component, precision, shape, 0, len(payloads[-1])))

    table_len = sum(len(_encode_entry(s)) for s in sections)
    header_len = len(_encode_header(cfg, len(sections), 0, 0))
    payload_offset = header_len + table_len
    offset = payload_offset
    placed = []
    for s in sections:
        placed.append(replace(s, offset=offset))
        offset += s.length
    header = _encode_header(cfg, len(placed), header_len, payload_offset)
    with open(path, "wb") as f:
        f.write(header)
        for s in placed:
            f.write(_encode_entry(s))
        for p in payloads:
            f.write(p)


# -- reading -----------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise TruncatedContainerError(f"file ends inside the {what}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out


def read_layout(data: bytes) -> tuple[ModelConfig, list[Section], int]:
    """Parse and validate header and section table; returns (config, sections, payload_offset)."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    fixed = r.take(_FIXED.format, "header")
    _, version, _header_bytes = fixed[:3]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"container version {version}, this build reads {FORMAT_VERSION}")
    layers, heads, embed_dim, ffn_mult, patch, image, chans, classes = fixed[3:11]
    mode, mask, fprec, _, eps, ln_eps = fixed[11:]
    c = chans
    stats = r.take(f"<{c}d{c}d", "normalization constants")
    n_sections, payload_offset = r.take(_TAIL.format, "header")
    try:
        cfg = ModelConfig(
            layers=layers, heads=heads, embed_dim=embed_dim, ffn_mult=ffn_mult, patch_size=patch,
            image_size=image, in_channels=chans, num_classes=classes,
            attn_mode={v: k for k, v in _MODE_CODES.items()}[mode],
            ternary_layers={role for role, bit in _ROLE_BITS.items() if mask & bit},
            float_precision=_PRECISION_NAMES[fprec],
            pixel_mean=stats[:c], pixel_std=stats[c:], eps=eps, ln_eps=ln_eps,
        )
    except (KeyError, ValueError) as e:
        raise ContainerError(f"invalid model config in header: {e}") from None

    sections = []
    for i in range(n_sections):
        (name_len,) = r.take("<H", f"section table (entry {i})")
        (raw,) = r.take(f"<{name_len}s", f"section table (entry {i})")
        comp, prec, ndims = r.take("<BBB", f"section table (entry {i})")
        dims = r.take(f"<{ndims}I", f"section table (entry {i})")
        offset, length = r.take("<QQ", f"section table (entry {i})")
        try:
            sections.append(Section(raw.decode("utf-8"), COMPONENTS[comp], _PRECISION_NAMES[prec],
                                    tuple(dims), offset, length))
        except (IndexError, KeyError, UnicodeDecodeError):
            raise ContainerError(f"section table entry {i} is malformed") from None
    if r.pos > payload_offset:
        raise SectionOverlapError("section table runs into the payload")

    _validate_sections(cfg, sections, payload_offset, len(data))
    return cfg, sections, payload_offset


def _expected_length(s: Section) -> int:
    count = int(np.prod(s.dims)) if s.dims else 1
    if s.precision == "ternary":
        k_in, n_out = s.dims
        return packed_weight_bytes(n_out, k_in) + 2
    return count * (4 if s.precision == "f32" else 2)


def _validate_sections(cfg: ModelConfig, sections: list[Section], payload_offset: int, file_len: int):
    required = {name: (component, shape) for name, component, shape in tensor_specs(cfg)}
    seen = set()
    for s in sections:
        if s.name in seen:
            raise ContainerError(f"section {s.name!r} appears more than once")
        seen.add(s.name)
        if s.name not in required:
            raise ContainerError(f"unexpected section {s.name!r}")
        component, shape = required[s.name]
        if s.dims != shape or s.component != component:
            raise ContainerError(f"section {s.name!r} has dims {s.dims}, config needs {shape}")
        if s.precision == "ternary" and component not in TERNARY_ROLES:
            raise ContainerError(f"section {s.name!r} cannot be ternary")
        if s.precision != _precision_for(cfg, component):
            raise ContainerError(f"section {s.name!r} stored as {s.precision}, header says otherwise")
        if s.length != _expected_length(s):
            raise ContainerError(f"section {s.name!r} is {s.length} bytes, expected {_expected_length(s)}")
        if s.offset < payload_offset:
            raise SectionOverlapError(f"section {s.name!r} overlaps the header/section table")
        if s.offset + s.length > file_len:
            raise TruncatedContainerError(f"file ends inside section {s.name!r}")
    missing = [n for n in required if n not in seen]
    if missing:
        raise MissingTensorError(f"container lacks section {missing[0]!r}" + (
            f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    ordered = sorted(sections, key=lambda s: s.offset)
    for a, b in zip(ordered, ordered[1:]):
        if a.offset + a.length > b.offset:
            raise SectionOverlapError(f"sections {a.name!r} and {b.name!r} overlap")


def _decode_section(data: bytes, s: Section):
    raw = data[s.offset: s.offset + s.length]
    if s.precision == "f32":
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(s.dims)
    elif s.precision == "bf16":
        arr = from_bf16_bits(np.frombuffer(raw, dtype="<u2")).reshape(s.dims)
    else:
        k_in, n_out = s.dims
        words = np.frombuffer(raw[:-2], dtype="<u4").astype(np.uint32)
        beta = from_bf16_bits(np.frombuffer(raw[-2:], dtype="<u2"))[0]
        try:
            check_words(words)
        except CorruptPackedDataError as e:
            raise CorruptTernaryError(f"section {s.name!r}: {e}") from None
        if not np.isfinite(beta):
            raise ContainerError(f"section {s.name!r} has a non-finite beta")
        return PackedWeightTiles(n_out=n_out, k_in=k_in, words=words, beta=np.float32(beta))
    if not np.all(np.isfinite(arr)):
        raise ContainerError(f"section {s.name!r} holds non-finite values")
    return arr


def load(path) -> tuple[ModelWeights, ModelConfig]:
    data = Path(path).read_bytes()
    cfg, sections, _ = read_layout(data)
    tensors = {s.name: _decode_section(data, s) for s in sections}
    return from_tensor_dict(cfg, tensors), cfg


def inspect(path) -> dict:
    """Header and section table as plain data (for pretty printing)."""
    data = Path(path).read_bytes()
    cfg, sections, payload_offset = read_layout(data)
    rows = []
    for s in sections:
        row = {"name": s.name, "component": s.component, "precision": s.precision,
               "dims": list(s.dims), "offset": s.offset, "length": s.length}
        if s.precision == "ternary":
            row["beta"] = float(from_bf16_bits(np.frombuffer(data[s.offset + s.length - 2: s.offset + s.length],
                                                             dtype="<u2"))[0])
        rows.append(row)
    return {
        "magic": MAGIC.decode(),
        "format_version": FORMAT_VERSION,
        "file_bytes": len(data),
        "header_bytes": payload_offset,
        "payload_bytes": sum(s.length for s in sections),
        "config": {
            "layers": cfg.layers, "heads": cfg.heads, "embed_dim": cfg.embed_dim,
            "ffn_mult": cfg.ffn_mult, "patch_size": cfg.patch_size, "image_size": cfg.image_size,
            "in_channels": cfg.in_channels, "num_classes": cfg.num_classes,
            "attn_mode": cfg.attn_mode.value, "ternary_layers": sorted(cfg.ternary_layers),
            "float_precision": cfg.float_precision, "eps": cfg.eps, "ln_eps": cfg.ln_eps,
            "pixel_mean": list(cfg.pixel_mean), "pixel_std": list(cfg.pixel_std),
        },
        "sections": rows,
    }


# -- conversion --------------------------------------------------------------


def read_float_tensors(path) -> tuple[dict[str, np.ndarray], ModelConfig | None]:
    """Float tensors from a directory of ``<name>.ften`` files or a float container."""
    path = Path(path)
    if path.is_dir():
        return {p.name[: -len(".ften")]: read_ften(p) for p in sorted(path.glob("*.ften"))}, None
    weights, cfg = load(path)
    return to_tensor_dict(weights), cfg


def write_float_tensors(weights: ModelWeights, directory) -> None:
    from .tensor import write_ften

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in to_tensor_dict(weights).items():
        if isinstance(value, (TernaryWeightMatrix, PackedWeightTiles)):
            raise ShapeError(f"tensor {name!r} is already ternary")
        write_ften(directory / f"{name}.ften", value)


def convert(tensors: dict, cfg: ModelConfig, ternary_layers=None) -> tuple[ModelWeights, ModelConfig]:
    """Quantize and pack the selected roles; other tensors keep float precision."""
    if ternary_layers is not None:
        cfg = replace(cfg, ternary_layers=frozenset(ternary_layers))
    for name, _, _ in tensor_specs(cfg):
        if name not in tensors:
            raise MissingTensorError(f"missing tensor {name!r}")
        value = tensors[name]
        if not isinstance(value, (TernaryWeightMatrix, PackedWeightTiles)) and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite values in tensor {name!r}")
    weights = from_tensor_dict(cfg, tensors)
    return quantize_weights(weights, cfg, packed=True), cfg


def convert_file(src, dst, cfg: ModelConfig | None = None, ternary_layers=None) -> dict:
    tensors, stored_cfg = read_float_tensors(src)
    cfg = cfg or stored_cfg
    if cfg is None:
        raise ValueError("a model config is required when converting FTEN tensors")
    weights, cfg = convert(tensors, cfg, ternary_layers)
    save(weights, cfg, dst)
    info = inspect(dst)
    float_bytes = sum(4 * int(np.prod(shape)) for _, _, shape in tensor_specs(cfg))
    return {"config": cfg, "file_bytes": info["file_bytes"], "payload_bytes": info["payload_bytes"],
            "header_bytes": info["header_bytes"], "float32_bytes": float_bytes}
