"""Compare the compiled sweep kernels with the pure-Python fallback.

Times each kernel on block-sized mark tables, then one gcbench run per
backend in a subprocess (the backend is fixed at import).

    python benchmarks/bench_kernels.py [--repeat N] [--depth D] [--blocks B]
"""

import argparse
import os
import random
import subprocess
import sys
import timeit

from nofl import _kernels_py

GRANULES = 4096


def tables(seed=1):
    """Block mark tables: sparse survivors, dense survivors, all holes."""
    rng = random.Random(seed)
    sparse = bytearray(GRANULES)
    for i in range(0, GRANULES - 2, 256):
        sparse[i] = 2 | 32
    dense = bytearray(GRANULES)
    i = 0
    while i < GRANULES - 4:
        n = rng.randrange(1, 4)
        dense[i] = 2
        dense[i + n - 1] |= 32
        i += n + rng.randrange(0, 2)
    return {"sparse": sparse, "dense": dense, "empty": bytearray(GRANULES)}


def walk_holes(k, buf):
    s = holes = 0
    while s < GRANULES:
        a, s = k.next_hole(buf, 0, GRANULES, s, 2)
        if a < s:
            holes += 1
    return holes


def kernel_cases(k, buf):
    return {
        "scan_state": lambda: k.scan_state(buf, 0, GRANULES, 0, 3),
        "scan_end": lambda: k.scan_end(buf, 0, GRANULES, 1),
        "next_hole walk": lambda: walk_holes(k, buf),
        "try_mark": lambda: k.try_mark(bytearray(b"\x01"), 0, 2),
    }


def time_kernels(repeat):
    backends = [("python", _kernels_py)]
    try:
        from nofl import _kernels
        backends.append(("cython", _kernels))
    except ImportError:
        print("compiled kernels not built; timing the fallback only")
    rows = []
    for table, buf in tables().items():
        for name in kernel_cases(_kernels_py, buf):
            times = {}
            for label, k in backends:
                fn = kernel_cases(k, buf)[name]
                n, _ = timeit.Timer(fn).autorange()
                best = min(timeit.repeat(fn, number=n, repeat=repeat)) / n
                times[label] = best
            rows.append((table, name, times))
    print(f"{'table':8} {'kernel':15} {'python us':>11} {'cython us':>11} {'speedup':>8}")
    for table, name, t in rows:
        py = t["python"] * 1e6
        cy = t.get("cython")
        if cy is None:
            print(f"{table:8} {name:15} {py:11.2f}")
        else:
            print(f"{table:8} {name:15} {py:11.2f} {cy * 1e6:11.2f} {py / (cy * 1e6):7.1f}x")


WORKLOAD = """
import time
from nofl.kernels import BACKEND
from nofl.bench.runner import run_once
from nofl.bench.workloads import GcbenchParams
r = run_once("gcbench", "mmc", {blocks} * 69632, params=GcbenchParams(max_depth={depth}))
print(BACKEND, r.record.outcome, r.record.cycles, r.record.wall_total_ns / 1e9,
      r.record.wall_pause_ns / 1e9)
"""


def time_workload(depth, blocks):
    print(f"\ngcbench max_depth={depth} on mmc, {blocks} blocks")
    print(f"{'backend':8} {'outcome':8} {'cycles':>6} {'total s':>8} {'pause s':>8}")
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("NOFL_PURE_PYTHON", None)
        if pure:
            env["NOFL_PURE_PYTHON"] = "1"
        out = subprocess.run([sys.executable, "-c", WORKLOAD.format(depth=depth, blocks=blocks)],
                             env=env, capture_output=True, text=True, check=True).stdout
        backend, outcome, cycles, total, pause = out.split()
        print(f"{backend:8} {outcome:8} {cycles:>6} {float(total):8.3f} {float(pause):8.3f}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--blocks", type=int, default=8, help="heap size in blocks")
    args = p.parse_args()
    time_kernels(args.repeat)
    time_workload(args.depth, args.blocks)


if __name__ == "__main__":
    main()
