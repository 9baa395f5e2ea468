"""Command line entry point: download, bench-ops, bench-model, verify.

Exit codes are part of the interface: 0 success, 2 usage error, 3 network or
cache error, 4 load or shape error, 5 verification failure. A plain
key=value config file can hold the boring flags; explicit flags win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, checkpoint
from .backends import get_backend
from .models import forward
from .tensor import DTypeError, ShapeError
from .tokenizers import VocabError, encode_batch, load_tokenizer

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NETWORK = 3
EXIT_LOAD = 4
EXIT_VERIFY = 5

VERIFY_TOLERANCE = 5e-3

log = logging.getLogger("encbench")


class VerificationFailure(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def load_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {raw!r} is not key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _backends_arg(name: str) -> tuple[str, ...]:
    return ("reference", "optimized") if name == "both" else (name,)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encbench",
        description="Portable encoder inference engine and latency harness.",
    )
    parser.add_argument("--config", help="key=value config file with flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, out=True):
        p.add_argument("--cache-dir", help="checkpoint cache directory")
        p.add_argument("--offline", action="store_true", default=None,
                       help="never touch the network; fail on cache misses")
        p.add_argument("--seed", type=int, help="input generation seed (default 0)")
        if out:
            p.add_argument("--out", help="report output directory (default ./bench-out)")

    p_dl = sub.add_parser("download", help="fetch a model repo into the cache")
    p_dl.add_argument("repo_id")
    p_dl.add_argument("--revision", default=None)
    shared(p_dl, out=False)

    p_ops = sub.add_parser("bench-ops", help="time the kernel registry")
    p_ops.add_argument("--op", action="append", dest="ops", metavar="NAME",
                       help="restrict to one op (repeatable)")
    p_ops.add_argument("--backend", choices=("reference", "optimized", "both"))
    p_ops.add_argument("--iterations", type=int)
    p_ops.add_argument("--warmup", type=int)
    shared(p_ops)

    p_model = sub.add_parser("bench-model", help="time one model over the input grid")
    p_model.add_argument("repo_id")
    p_model.add_argument("--revision", default=None)
    p_model.add_argument("--lengths", type=_int_list, help="comma list, default 50,100,200,500")
    p_model.add_argument("--batches", type=_int_list, help="comma list, default 1,16,32")
    p_model.add_argument("--iterations", type=int)
    p_model.add_argument("--warmup", type=int)
    p_model.add_argument("--backend", choices=("reference", "optimized", "both"))
    p_model.add_argument("--corpus", help="input corpus file, one sentence per line")
    shared(p_model)

    p_verify = sub.add_parser("verify", help="compare model output against a golden file")
    p_verify.add_argument("repo_id")
    p_verify.add_argument("--revision", default=None)
    p_verify.add_argument("--golden", help="golden .npz (default fixtures/goldens/<repo>.npz)")
    p_verify.add_argument("--backend", choices=("reference", "optimized"), default=None)
    p_verify.add_argument("--tolerance", type=float, default=None)
    shared(p_verify, out=False)
    return parser


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if not args.config:
        return
    try:
        values = load_config_file(args.config)
    except (OSError, ValueError) as e:
        parser.error(str(e))
    casts = {
        "seed": int, "iterations": int, "warmup": int,
        "lengths": _int_list, "batches": _int_list,
        "offline": lambda v: v.lower() in ("1", "true", "yes"),
    }
    for key, raw in values.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            continue
        if getattr(args, attr) is None:
            setattr(args, attr, casts.get(attr, str)(raw))


def _resolve(args, name, default):
    value = getattr(args, name, None)
    return default if value is None else value


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_download(args) -> int:
    family, files = checkpoint.fetch_repo(
        args.repo_id, _resolve(args, "revision", "main"), args.cache_dir, args.offline)
    print(f"{args.repo_id}: family {family}")
    for name, path in sorted(files.items()):
        print(f"  {name}: {path}")
    return EXIT_OK


def cmd_bench_ops(args, parser) -> int:
    ops = tuple(args.ops) if args.ops else None
    if ops:
        unknown = [o for o in ops if o not in bench.OP_REGISTRY]
        if unknown:
            parser.error(f"unknown op(s): {', '.join(unknown)} "
                         f"(choose from {', '.join(bench.OP_REGISTRY)})")
    spec = bench.OpBenchSpec(
        ops=ops,
        iterations=_resolve(args, "iterations", bench.DEFAULT_OP_ITERATIONS),
        warmup=_resolve(args, "warmup", bench.DEFAULT_WARMUP),
        backends=_backends_arg(_resolve(args, "backend", "both")),
        seed=_resolve(args, "seed", 0),
    )
    report = bench.run_op_bench(spec)
    outdir = Path(_resolve(args, "out", "bench-out")) / "ops"
    written = bench.write_report(report, outdir, _pairs(spec.backends))
    print(bench.render_average(bench.aggregates_by_subject(report.records),
                               _pairs(spec.backends), report.header_notes))
    print(f"wrote {len(written)} files under {outdir}")
    return EXIT_OK


def _pairs(backends) -> tuple[tuple[str, str], ...]:
    return ((("optimized", "reference"),)
            if {"optimized", "reference"} <= set(backends) else ())


def cmd_bench_model(args) -> int:
    spec = bench.ModelBenchSpec(
        repo_id=args.repo_id,
        revision=_resolve(args, "revision", "main"),
        char_lengths=_resolve(args, "lengths", bench.DEFAULT_CHAR_LENGTHS),
        batch_sizes=_resolve(args, "batches", bench.DEFAULT_BATCH_SIZES),
        iterations=_resolve(args, "iterations", bench.DEFAULT_MODEL_ITERATIONS),
        warmup=_resolve(args, "warmup", bench.DEFAULT_WARMUP),
        backends=_backends_arg(_resolve(args, "backend", "both")),
        corpus_path=getattr(args, "corpus", None),
        seed=_resolve(args, "seed", 0),
    )
    report = bench.run_model_bench(spec, cache_dir=args.cache_dir, offline=args.offline)
    outdir = Path(_resolve(args, "out", "bench-out")) / args.repo_id.replace("/", "--")
    written = bench.write_report(report, outdir, _pairs(spec.backends))
    print(bench.render_average(bench.aggregates_overall(report.records),
                               _pairs(spec.backends)))
    print(f"wrote {len(written)} files under {outdir}")
    return EXIT_OK


def cmd_verify(args, parser) -> int:
    golden_path = args.golden or (
        Path("fixtures") / "goldens" / f"{args.repo_id.replace('/', '--')}.npz")
    golden_path = Path(golden_path)
    if not golden_path.is_file():
        parser.error(f"golden file {golden_path} does not exist")
    golden = np.load(golden_path, allow_pickle=False)

    loaded = checkpoint.load_encoder(
        args.repo_id, _resolve(args, "revision", "main"), args.cache_dir, args.offline)
    tokenizer = load_tokenizer(loaded.config.family, loaded.files)
    backend = get_backend(args.backend or "optimized")
    tolerance = args.tolerance if args.tolerance is not None else VERIFY_TOLERANCE

    texts = [str(t) for t in golden["texts"]]
    encoding = encode_batch(texts, tokenizer)
    failures = []
    if not np.array_equal(encoding.input_ids.data, golden["input_ids"]):
        failures.append("token ids")
        print("token ids: MISMATCH against golden encoding")
    else:
        print("token ids: match")

    out = forward(encoding.to_encoder_input(), loaded.weights, loaded.config, backend)
    backend.synchronize()
    checks = [("last_hidden_state", out.last_hidden_state)]
    if "pooler_output" in golden.files and out.pooler_output is not None:
        checks.append(("pooler_output", out.pooler_output))
    for name, tensor_out in checks:
        diff = float(np.max(np.abs(tensor_out.data - golden[name])))
        status = "ok" if diff <= tolerance else "FAIL"
        print(f"{name}: max abs diff {diff:.3e} (tolerance {tolerance:.1e}) {status}")
        if diff > tolerance:
            failures.append(name)
    if failures:
        raise VerificationFailure(f"verification failed for: {', '.join(failures)}")
    print("verification passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config_file(args, parser)
    try:
        if args.command == "download":
            return cmd_download(args)
        if args.command == "bench-ops":
            return cmd_bench_ops(args, parser)
        if args.command == "bench-model":
            return cmd_bench_model(args)
        if args.command == "verify":
            return cmd_verify(args, parser)
        parser.error(f"unknown command {args.command!r}")
    except checkpoint.HubError as e:
        print(f"network/cache error: {e}", file=sys.stderr)
        return EXIT_NETWORK
    except VerificationFailure as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except bench.BenchError as e:
        cause = e.__cause__
        while cause is not None:
            if isinstance(cause, checkpoint.HubError):
                print(f"network/cache error: {e}", file=sys.stderr)
                return EXIT_NETWORK
            cause = cause.__cause__
        print(f"benchmark error: {e}", file=sys.stderr)
        return EXIT_LOAD
    except (checkpoint.CheckpointError, ShapeError, DTypeError, VocabError,
            IndexError, OSError, ValueError) as e:
        print(f"load error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_LOAD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
