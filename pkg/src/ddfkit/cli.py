"""``ddfkit`` command line: verify, bench, complexity, train-demo, upsample.

Exit status: 0 success, 1 a checked property failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _np_dtype(name: str):
    return np.float32 if name == "f32" else np.float64


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="PRNG seed (PCG64)")
    p.add_argument("--dtype", choices=("f32", "f64"), default=d("f64"))
    p.add_argument("--threads", type=int, default=d(1), help="BLAS / OpenMP thread cap")
    p.add_argument("--format", choices=("table", "json", "csv"), default=d("table"))


def _write_or_print(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .verify import run_verify

    report = run_verify(args.seed or 0, args.tolerance, args.dtype, args.grad_seeds)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    sys.stdout.write(report.render(args.format))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_bench(args) -> int:
    from .bench import BenchConfig, capped_memory_check, ordering_checks, run_bench

    try:
        ops = tuple(o.strip() for o in args.ops.split(",") if o.strip())
        cfg = BenchConfig(tuple(args.shape), args.k, ops, args.warmup, args.iters, args.threads,
                          args.dtype, args.seed or 0, args.cap)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = run_bench(cfg, log=lambda m: print(f"notice: {m}", file=sys.stderr))
    report.memory_check = capped_memory_check(dtype=cfg.np_dtype)
    report.checks = ordering_checks(report)
    sys.stdout.write(report.render(args.format))
    if args.format == "table":
        for name, ok in report.checks.items():
            print(f"check {name}: {'PASS' if ok else 'FAIL'}")
    if args.check and not all(report.checks.values()):
        return EXIT_FAIL
    return EXIT_OK


def cmd_complexity(args) -> int:
    from .complexity import BUILTINS, builtin, cost_table, load_descriptor, network_cost

    names = args.networks or list(BUILTINS)
    reports = []
    for name in names:
        try:
            descr = builtin(name) if name in BUILTINS else load_descriptor(name)
        except FileNotFoundError:
            raise UsageError(f"{name!r} is neither a builtin ({', '.join(BUILTINS)}) nor a readable file")
        except (ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"{name}: malformed descriptor: {exc}")
        for sigma in args.sigma or [None]:
            d = descr if sigma is None else descr.with_sigma(sigma)
            rep = network_cost(d)
            if sigma is not None:
                rep.name = f"{rep.name}@sigma={sigma}"
            reports.append(rep)
    sys.stdout.write(cost_table(reports, args.format))
    return EXIT_OK


def cmd_train_demo(args) -> int:
    from .toy import ToyNetSpec, toy_train

    try:
        spec = ToyNetSpec.from_json(args.spec) if args.spec else ToyNetSpec()
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad toy net spec: {exc}")
    if args.seed is not None:
        spec.seed = args.seed
    log = toy_train(spec, args.task, args.epochs, args.lr, args.fn == "on", dtype=_np_dtype(args.dtype))
    _write_or_print(log.to_csv(), args.out)
    if args.out:
        print(f"wrote {len(log.epochs)} rows to {args.out}; final loss {log.loss[-1]:.6g}"
              + (" (diverged)" if log.diverged else ""))
    return EXIT_OK


def _to_4d(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.ndim == 2:
        return arr[None, None]
    if arr.ndim == 3:
        return arr[None]
    if arr.ndim == 4:
        return arr
    raise UsageError(f"{name} must have rank 2, 3 or 4, got shape {arr.shape}")


def cmd_upsample(args) -> int:
    from .tensor.geometry import ShapeError
    from .tensor.io import TensorFormatError, load_tensor, save_tensor
    from .upsample import baseline_upsample, load_upsampler, rmse

    dt = _np_dtype(args.dtype)
    try:
        raw = load_tensor(args.input)
    except (OSError, TensorFormatError) as exc:
        raise UsageError(f"cannot read --input: {exc}")
    x = _to_4d(raw, "--input").astype(dt)
    if args.factor < 2:
        raise UsageError("--factor must be >= 2")
    try:
        if args.baseline:
            out = baseline_upsample(x, args.factor, args.baseline)
        else:
            if not args.weights:
                raise UsageError("network mode needs --weights (or pass --baseline)")
            if not args.guide:
                raise UsageError("joint upsampling needs --guide")
            if args.factor not in (4, 8, 16):
                raise UsageError("network factor must be 4, 8 or 16")
            net = load_upsampler(args.weights, dt)
            if net.spec.factor != args.factor:
                raise UsageError(f"weights were trained for x{net.spec.factor}, not x{args.factor}")
            g = _to_4d(load_tensor(args.guide), "--guide").astype(dt)
            out = net(x, g)
    except (ShapeError, TensorFormatError) as exc:
        raise UsageError(str(exc))
    except OSError as exc:
        raise UsageError(f"cannot read file: {exc}")
    out = out.reshape(out.shape[-raw.ndim:]) if raw.ndim < 4 else out
    if args.out:
        save_tensor(args.out, out)
    if args.gt:
        gt = load_tensor(args.gt)
        if gt.size != out.size:
            raise UsageError(f"--gt shape {gt.shape} does not match output {out.shape}")
        print(f"rmse {rmse(out.reshape(gt.shape), gt):.6f}")
    if not args.out and not args.gt:
        print(f"output shape {tuple(out.shape)} (pass --out to save)")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddfkit", description="Decoupled dynamic filter toolkit")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("verify", cmd_verify, "run the correctness property suite")
    p.add_argument("--tolerance", type=float, default=None, help="equivalence tolerance (default 1e-6 f64, 1e-4 f32)")
    p.add_argument("--grad-seeds", type=int, default=5, help="number of seeds for gradient checks")
    p.add_argument("--report", help="also write the JSON report here")

    p = add("bench", cmd_bench, "time and measure operators")
    p.add_argument("--shape", type=int, nargs=4, metavar=("B", "C", "H", "W"), default=[2, 256, 200, 300])
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--ops", default="conv,dwconv,ddf_fused,dense_dynamic",
                   help="comma list from conv,dwconv,ddf_fused,ddf_naive,dense_dynamic,ddf_up")
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--cap", type=int, default=2**24, help="element cap for the dense oracle")
    p.add_argument("--check", action="store_true", help="exit 1 if an ordering check fails")

    p = add("complexity", cmd_complexity, "parameter / FLOP / filter-space report")
    p.add_argument("networks", nargs="*", help="builtin names or descriptor JSON paths (default: all builtins)")
    p.add_argument("--sigma", type=float, action="append", help="override the DDF squeeze ratio (repeatable)")

    p = add("train-demo", cmd_train_demo, "train the toy DDF net and log loss and filter magnitude")
    p.add_argument("--spec", help="toy net spec JSON (default: built-in two-block net)")
    p.add_argument("--task", default="bars")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--fn", choices=("on", "off"), default="on", help="filter normalization")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = add("upsample", cmd_upsample, "joint DDF-Up network or an interpolation baseline")
    p.add_argument("--input", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--guide")
    p.add_argument("--weights")
    p.add_argument("--out")
    p.add_argument("--baseline", choices=("nearest", "bilinear", "bicubic"))
    p.add_argument("--gt")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
