#!/usr/bin/env python3
"""Run the full default measurement protocol and write every report.

One invocation reproduces the complete experiment grid: the operation
microbenchmarks (five timed iterations per op per backend) and the model
inference benchmarks (ten timed iterations per cell over character lengths
50/100/200/500 and batch sizes 1/16/32, on both backends), with detailed,
per-length, per-batch, and overall average tables plus machine-readable
twins and a manifest.

Defaults target the committed fixture checkpoints so the whole thing runs
offline in minutes:

    python3 scripts/run_protocol.py --out protocol-out

Point it at real hub checkpoints when network (or a warm cache) exists:

    python3 scripts/run_protocol.py --repos bert-base-uncased,roberta-base \
        --cache-dir ~/.cache/encbench --out protocol-out
"""

import argparse
import sys
import time
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from encbench import bench  # noqa: E402

FIXTURE_REPOS = ("fixtures/bert-mini", "fixtures/roberta-mini", "fixtures/xlmr-mini")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repos", default=",".join(FIXTURE_REPOS),
                    help="comma-separated checkpoint repo ids")
    ap.add_argument("--cache-dir", default=str(REPO_ROOT / "fixtures" / "hub_cache"))
    ap.add_argument("--out", default="protocol-out")
    ap.add_argument("--offline", action="store_true", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=None,
                    help="override timed iterations for the model runs")
    ap.add_argument("--skip-ops", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    t0 = time.monotonic()

    if not args.skip_ops:
        print("== operation microbenchmarks ==")
        ops_report = bench.run_op_bench(bench.OpBenchSpec(seed=args.seed))
        bench.write_report(ops_report, out / "ops")
        print(bench.render_average(bench.aggregates_by_subject(ops_report.records),
                                   header_notes=ops_report.header_notes))

    for repo_id in [r for r in args.repos.split(",") if r]:
        print(f"== model inference: {repo_id} ==")
        kwargs = {"repo_id": repo_id, "seed": args.seed}
        if args.iterations:
            kwargs["iterations"] = args.iterations
        report = bench.run_model_bench(bench.ModelBenchSpec(**kwargs),
                                       cache_dir=args.cache_dir, offline=args.offline)
        bench.write_report(report, out / repo_id.replace("/", "--"))
        print(bench.render_average(bench.aggregates_by_length(report.records)))
        print(bench.render_average(bench.aggregates_by_batch(report.records)))
        print(bench.render_average(bench.aggregates_overall(report.records)))

    print(f"done in {time.monotonic() - t0:.0f}s; reports under {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
