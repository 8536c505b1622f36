"""``ternvit`` command line: init, convert, inspect, verify, bench, classify.

Exit status is 0 on success, 1 when ``verify`` finds a failing property and
2 for bad input (missing tensors, malformed files, invalid flags).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, model_io
from .errors import TernvitError
from .kernel import THREADS_ENV
from .model import TERNARY_ROLES, ModelConfig, forward, init_weights, param_count, preprocess
from .tensor import read_ften, softmax_rows
from .verify import SUITES, run_suites

# flag name -> ModelConfig field
_CONFIG_FLAGS = {
    "layers": "layers", "heads": "heads", "embed_dim": "embed_dim", "ffn_mult": "ffn_mult",
    "patch": "patch_size", "image_size": "image_size", "in_channels": "in_channels",
    "classes": "num_classes", "attn_mode": "attn_mode", "float_precision": "float_precision",
}


class UsageError(Exception):
    pass


def _roles(text: str) -> frozenset:
    roles = frozenset(r.strip() for r in text.split(",") if r.strip())
    unknown = roles - set(TERNARY_ROLES)
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown roles {sorted(unknown)}; choose from {','.join(TERNARY_ROLES)}")
    return roles


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise argparse.ArgumentTypeError(f"{text!r} is not one of {', '.join(options)}")
        return text

    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model config (defaults: L=3, H=8, D=512, 4x FFN, patch 16, 224x224x3, 9 classes)")
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--embed-dim", type=int)
    g.add_argument("--ffn-mult", type=int)
    g.add_argument("--patch", type=int, help="patch size in pixels")
    g.add_argument("--image-size", type=int)
    g.add_argument("--in-channels", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--attn-mode", choices=("mhsa", "mqa"))
    g.add_argument("--float-precision", choices=("f32", "bf16"))
    g.add_argument("--ternary-set", type=_roles,
                   help=f"comma-separated roles to ternarize, from {','.join(TERNARY_ROLES)} (default ffn)")


def _config(args, base: ModelConfig | None = None) -> ModelConfig:
    overrides = {f: getattr(args, flag) for flag, f in _CONFIG_FLAGS.items() if getattr(args, flag) is not None}
    if getattr(args, "ternary_set", None) is not None:
        overrides["ternary_layers"] = args.ternary_set
    if base is None:
        return ModelConfig(**overrides)
    if "in_channels" in overrides and overrides["in_channels"] != base.in_channels:
        overrides.setdefault("pixel_mean", None)
        overrides.setdefault("pixel_std", None)
    return replace(base, **overrides)


def _mb(n: int) -> str:
    return f"{n:,} B ({n / 1e6:.2f} MB)"


# -- commands ----------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = _config(args)
    weights = init_weights(cfg, seed=args.seed, std=args.std)
    model_io.write_float_tensors(weights, args.out)
    print(f"wrote {param_count(cfg)['total']:,} float parameters to {args.out}")
    return 0


def cmd_convert(args) -> int:
    src = Path(args.src)
    stored = None if src.is_dir() else model_io.read_float_tensors(src)[1]
    cfg = _config(args, stored)
    summary = model_io.convert_file(src, args.dst, cfg)
    cfg = summary["config"]
    print(f"converted {src} -> {args.dst}")
    print(f"  ternary roles   {','.join(sorted(cfg.ternary_layers)) or '(none)'}; "
          f"other tensors {cfg.float_precision}")
    print(f"  parameters      {param_count(cfg)['total']:,}")
    print(f"  float32 size    {_mb(summary['float32_bytes'])}")
    print(f"  payload size    {_mb(summary['payload_bytes'])}")
    print(f"  header+table    {summary['header_bytes']:,} B")
    print(f"  file size       {_mb(summary['file_bytes'])}")
    print(f"  compression     {summary['float32_bytes'] / summary['payload_bytes']:.2f}x")
    return 0


def cmd_inspect(args) -> int:
    info = model_io.inspect(args.model)
    if args.json:
        json.dump(info, sys.stdout, indent=2)
        print()
        return 0
    print(f"{info['magic']} v{info['format_version']}  file {_mb(info['file_bytes'])}  "
          f"header+table {info['header_bytes']:,} B  payload {_mb(info['payload_bytes'])}")
    for k, v in info["config"].items():
        print(f"  {k:16s}{v}")
    print(f"  {'name':28s}{'component':12s}{'precision':10s}{'dims':16s}{'offset':>10s}{'bytes':>10s}  beta")
    for s in info["sections"]:
        dims = "x".join(map(str, s["dims"]))
        beta = f"  {s['beta']:.6g}" if "beta" in s else ""
        print(f"  {s['name']:28s}{s['component']:12s}{s['precision']:10s}{dims:16s}"
              f"{s['offset']:>10d}{s['length']:>10d}{beta}")
    return 0


def cmd_verify(args) -> int:
    suites = args.suite or list(SUITES)
    if args.model and "model" not in suites:
        suites.append("model")
    if args.distill and "distill" not in suites:
        suites.append("distill")
    results = run_suites(suites, seed=args.seed, model_path=args.model, distill_dir=args.distill)
    for c in results:
        status = "PASS" if c.passed else "FAIL"
        detail = f"  ({c.detail})" if c.detail else ""
        print(f"{status}  {c.suite}: {c.name}{detail}")
    failed = sum(not c.passed for c in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    rows = bench.run(args.workload or list(bench.WORKLOADS), cfg, repeats=args.repeats,
                     threads=args.threads, seed=args.seed)
    bench.write_csv(rows)
    return 0


def load_image(path, cfg: ModelConfig) -> np.ndarray:
    """An (H, W, C) float image in [0, 1]: PNG/JPEG via Pillow, or an FTEN tensor."""
    path = Path(path)
    if path.read_bytes()[:4] == b"FTEN":
        img = read_ften(path)
    else:
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(path) as im:
                im = im.convert("L" if cfg.in_channels == 1 else "RGB")
                img = np.asarray(im, dtype=np.float32) / np.float32(255)
        except (UnidentifiedImageError, OSError) as e:
            raise UsageError(f"cannot read image {path}: {e}") from None
    if img.ndim == 2:
        img = img[:, :, None]
    expect = (cfg.image_size, cfg.image_size, cfg.in_channels)
    if img.shape != expect:
        raise UsageError(f"image {path} has shape {img.shape}, model expects {expect}")
    return img


def cmd_classify(args) -> int:
    weights, cfg = model_io.load(args.model)
    img = load_image(args.image, cfg)
    logits = forward(preprocess(img, cfg), weights, cfg)
    probs = softmax_rows(logits[None, :].astype(np.float64))[0]
    labels = [str(i) for i in range(cfg.num_classes)]
    if args.labels:
        given = [line.strip() for line in Path(args.labels).read_text().splitlines() if line.strip()]
        if len(given) != cfg.num_classes:
            raise UsageError(f"{args.labels} has {len(given)} labels, model has {cfg.num_classes} classes")
        labels = given
    top = int(np.argmax(probs))
    print(f"class {top} {labels[top]}")
    for i in np.argsort(-probs, kind="stable"):
        print(f"  {labels[i]:20s}{probs[i]:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ternvit", description="Ternary-weight ViT inference tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write randomly initialized float tensors as FTEN files")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--std", type=float, default=0.02)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("convert", help="quantize float tensors into a .bmvc container")
    p.add_argument("src", help="directory of <name>.ften files, or a float .bmvc container")
    p.add_argument("dst", help="output .bmvc path")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("inspect", help="print a container's header and section table")
    p.add_argument("model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("verify", help="run the invariant suites; exit 0 iff all pass")
    p.add_argument("suite", nargs="*", type=_choice(SUITES), metavar="suite",
                   help=f"any of {', '.join(SUITES)} (default all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", help="also check packed == unpacked forward on this container")
    p.add_argument("--distill", metavar="DIR",
                   help="FTEN loss fixture directory: student_logits, teacher_logits, label, student_feat, "
                        "teacher_feat, projection, weights (l_cls, l_logits, l_feat, T), "
                        "expected (ce, kd, feat, total)")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="time kernels and the full model; CSV on stdout")
    p.add_argument("workload", nargs="*", type=_choice(bench.WORKLOADS), metavar="workload",
                   help=f"any of {', '.join(bench.WORKLOADS)} (default all)")
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--threads", type=int,
                   help=f"single parallelism degree (default: 1 and physical cores; env {THREADS_ENV} "
                        "sets the inference default)")
    p.add_argument("--seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("classify", help="classify one image")
    p.add_argument("model")
    p.add_argument("image", help="PNG/JPEG (scaled to [0, 1]) or an (H, W, C) FTEN tensor")
    p.add_argument("--labels", help="text file with one class name per line")
    p.set_defaults(fn=cmd_classify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (TernvitError, UsageError, ValueError, OSError) as e:
        print(f"ternvit {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
