"""Command-line entry point: ``sepattn {bench,fit,scoremap,params,verify}``.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import sys

from . import bench, verify
from .attention import KINDS
from .errors import ConfigurationError, DimensionError, UsageError
from .mobilevitv2 import ModelSpec, build_model, count_macs, count_params, load_spec, save_spec
from .tensor import DEFAULT_DTYPE, make_rng

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


def _kinds(text: str) -> tuple[str, ...]:
    kinds = tuple(KINDS) if text == "all" else tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(f"unknown attention kind(s) {bad}; choose from {', '.join(KINDS)} or 'all'")
    return kinds


def _ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty token list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="single-thread latency of the attention units vs token count")
    b.add_argument("--attn", type=_kinds, default=tuple(KINDS), help="comma list of mha,linformer,separable or 'all'")
    b.add_argument("--tokens", type=_ints, default=bench.DEFAULT_TOKENS, help="comma list of token counts k")
    b.add_argument("--dim", type=int, default=512)
    b.add_argument("--heads", type=int, default=8)
    b.add_argument("--proj", type=int, default=256, help="Linformer projected tokens p")
    b.add_argument("--repeats", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.csv")

    f = sub.add_parser("fit", help="fit log-log scaling exponents from a bench CSV")
    f.add_argument("csv")

    s = sub.add_parser("scoremap", help="export context score maps as PGM images")
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--image", help=".npy (3xHxW) or any Pillow-readable image; random if omitted")
    s.add_argument("--size", type=int, default=256, help="side of the random image when --image is omitted")
    s.add_argument("--out-dir", default="scoremaps")
    s.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("params", help="parameter and MAC counts")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--config", help="read the model spec from a JSON file instead of --alpha")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--save-config", help="write the model spec as JSON")

    v = sub.add_parser("verify", help="oracle, gradient and equivariance checks")
    v.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_bench(args) -> int:
    cfg = bench.BenchConfig(
        kinds=args.attn, tokens=args.tokens, d=args.dim, h=args.heads, p=args.proj,
        warmup=args.warmup, repeats=args.repeats, seed=args.seed,
    )
    records = bench.run_suite(cfg, args.out, progress=lambda r: print(
        f"{r.kind:<10} k={r.k:<6} median={r.median_s * 1e3:.3f} ms", file=sys.stderr))
    print(bench.latency_summary(records))
    _print_fits(records)
    print(f"wrote {args.out}")
    return EXIT_OK


def _print_fits(records) -> None:
    for kind in dict.fromkeys(r.kind for r in records):
        rs = [r for r in records if r.kind == kind]
        try:
            slope, intercept, r2 = bench.fit_scaling_exponent(rs)
        except UsageError as exc:
            print(f"{kind}: no fit ({exc})")
            continue
        print(f"{kind}: exponent={slope:.3f} intercept={intercept:.3f} r2={r2:.4f}")


def _cmd_fit(args) -> int:
    records = bench.read_csv(args.csv)
    if not records:
        raise UsageError(f"{args.csv} holds no records")
    _print_fits(records)
    return EXIT_OK


def _cmd_scoremap(args) -> int:
    model = build_model(args.alpha, make_rng(args.seed))
    if args.image:
        image = bench.load_image(args.image)
    else:
        image = make_rng(args.seed + 1).standard_normal((3, args.size, args.size)).astype(DEFAULT_DTYPE)
    for path in bench.export_score_maps(model, image, args.out_dir):
        print(path)
    return EXIT_OK


def _cmd_params(args) -> int:
    spec = load_spec(args.config) if args.config else ModelSpec.from_alpha(args.alpha)
    model = build_model(spec, make_rng(0))
    n, macs = count_params(model), count_macs(model, (args.resolution, args.resolution))
    print(f"alpha={spec.alpha:g} params={n} ({n / 1e6:.2f} M) "
          f"macs@{args.resolution}={macs} ({macs / 1e9:.2f} G)")
    if args.save_config:
        save_spec(spec, args.save_config)
    return EXIT_OK


def _cmd_verify(args) -> int:
    reports = verify.run_all(seed=args.seed)
    for r in reports:
        print(r.line())
    # The exit status follows the oracle and gradient checks only; the
    # equivariance lines are diagnostics (Linformer is position-indexed).
    gating = [r for r in reports if r.op.startswith(("oracle_", "grad_"))]
    return EXIT_OK if all(r.passed for r in gating) else EXIT_CHECK_FAILED


COMMANDS = {
    "bench": _cmd_bench,
    "fit": _cmd_fit,
    "scoremap": _cmd_scoremap,
    "params": _cmd_params,
    "verify": _cmd_verify,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, DimensionError, OSError, ValueError) as exc:
        print(f"sepattn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(cli_main())

