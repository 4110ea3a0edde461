"""Command line: ``bench run``, ``bench minheap`` and ``stats lbo``."""

import argparse
import logging
import sys

from .bench.runner import (BLOCK_FOOTPRINT, SLAB_BYTES, CsvSink, MatrixConfig,
                           benchmark_min_heap, find_min_heap, read_records, run_matrix)
from .bench.workloads import DESK_PARAMS, WORKLOADS
from .stats import METRICS, compute_lbo, summarize

ROUNDING = {"slab": SLAB_BYTES, "block": BLOCK_FOOTPRINT}


def _value(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _params(args):
    params = dict(DESK_PARAMS[args.benchmark]) if args.scale == "desk" else {}
    for item in args.param or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"--param expects key=value, got {item!r}")
        params[key.replace("-", "_")] = _value(val)
    return params


def _common(p):
    p.add_argument("--benchmark", required=True, choices=sorted(WORKLOADS))
    p.add_argument("--scale", choices=("desk", "classic"), default="desk",
                   help="parameter preset (default: desk)")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="override one benchmark parameter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout-s", type=float, default=90.0)
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser():
    parser = argparse.ArgumentParser(prog="nofl")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log every collection")
    top = parser.add_subparsers(dest="command", required=True)

    bench = top.add_parser("bench", help="run benchmarks").add_subparsers(
        dest="action", required=True)
    run = bench.add_parser("run", help="run a benchmark cell and append records to a CSV")
    _common(run)
    run.add_argument("--collector", required=True, choices=("mmc", "semi"))
    run.add_argument("--heap-multiplier", type=float, nargs="+", required=True)
    run.add_argument("--mutators", type=int, default=1)
    run.add_argument("--gc-workers", type=int, default=1)
    run.add_argument("--reps", type=int, default=10)
    run.add_argument("--evacuation", choices=("on", "off"), default="on")
    run.add_argument("--csv", required=True)
    run.add_argument("--min-heap-bytes", type=int,
                     help="skip measuring the minimum heap")
    run.add_argument("--heap-rounding", choices=sorted(ROUNDING), default="slab")
    run.add_argument("--fragmentation-threshold", type=float, default=0.10,
                     help="mmc: fragmented fraction of in-use blocks that triggers evacuation")
    run.add_argument("--reserve-fraction", type=float, default=0.02,
                     help="mmc: evacuation reserve as a fraction of blocks (at least one)")

    mh = bench.add_parser("minheap", help="measure a benchmark's minimum heap")
    _common(mh)
    mh.add_argument("--collector", required=True, choices=("mmc", "semi"))
    mh.add_argument("--granularity", type=int, default=BLOCK_FOOTPRINT)

    stats = top.add_parser("stats", help="analyse records").add_subparsers(
        dest="action", required=True)
    lbo = stats.add_parser("lbo", help="lower-bound overhead tables and plot data")
    lbo.add_argument("--csv", required=True)
    lbo.add_argument("--out-dir", required=True)
    lbo.add_argument("--metric", choices=METRICS, default="wall")
    lbo.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")

    if args.command == "bench" and args.action == "run":
        params = _params(args)
        if args.collector == "semi" and args.mutators != 1:
            print("semi supports exactly one mutator", file=sys.stderr)
            return 2
        min_heap = args.min_heap_bytes
        if min_heap is None:
            min_heap, found = benchmark_min_heap(args.benchmark, params=params,
                                                 seed=args.seed, timeout_s=args.timeout_s)
            for f in found:
                print(f"min heap {f.collector}: {f.bytes} bytes, net {f.net}", file=sys.stderr)
        config = MatrixConfig(benchmarks=[args.benchmark], multipliers=args.heap_multiplier,
                              collectors=[args.collector], mutators=[args.mutators],
                              workers=[args.gc_workers], reps=args.reps, seed=args.seed,
                              timeout_s=args.timeout_s, evacuation=args.evacuation == "on",
                              params={args.benchmark: params},
                              min_heaps={args.benchmark: min_heap},
                              heap_rounding=ROUNDING[args.heap_rounding],
                              heap_options={
                                  "fragmentation_threshold": args.fragmentation_threshold,
                                  "reserve_fraction": args.reserve_fraction})

        def show(r):
            print(f"{r.benchmark} {r.collector} x{r.multiplier:g} rep {r.repetition}: "
                  f"{r.outcome} {r.wall_total_ns / 1e9:.3f}s {r.cycles} cycles")

        with CsvSink(args.csv) as sink:
            run_matrix(config, sink=sink, on_record=show)
        return 0

    if args.command == "bench" and args.action == "minheap":
        found = find_min_heap(args.benchmark, args.collector, params=_params(args),
                              granularity=args.granularity, seed=args.seed,
                              timeout_s=args.timeout_s)
        print(f"benchmark={found.benchmark} collector={found.collector} "
              f"min_heap_bytes={found.bytes} overhead_bytes={found.overhead} "
              f"net_bytes={found.net} probes={found.probes}")
        return 0

    if args.command == "stats" and args.action == "lbo":
        report = compute_lbo(read_records(args.csv), args.metric)
        table, paths = summarize(report, args.out_dir)
        sys.stdout.write(table)
        for path in paths:
            print(f"wrote {path}")
        return 0
    return 2


def bench_main(argv=None):
    """Entry point for the ``bench`` command."""
    return main(["bench"] + list(sys.argv[1:] if argv is None else argv))


def stats_main(argv=None):
    """Entry point for the ``stats`` command."""
    return main(["stats"] + list(sys.argv[1:] if argv is None else argv))
