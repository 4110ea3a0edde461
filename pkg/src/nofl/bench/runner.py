"""Running benchmarks: one run per fresh heap, minimum-heap search, and the
multiplier matrix."""

import csv
import dataclasses
import logging
import os
import threading
import time
from dataclasses import dataclass

from ..errors import BenchTimeout, HeapExhausted
from ..geometry import BLOCK_FOOTPRINT, SLAB_BYTES
from ..heap import create_heap
from .workloads import WORKLOADS

log = logging.getLogger("nofl.bench")

OK = "ok"
HEAP_EXHAUSTED = "heap_exhausted"
TIMEOUT = "timeout"
DEFAULT_TIMEOUT_S = 90.0


@dataclass
class RunRecord:
    benchmark: str
    collector: str
    mutators: int
    workers: int
    heap_bytes: int
    multiplier: float
    repetition: int
    wall_total_ns: int = 0
    wall_pause_ns: int = 0
    cpu_total_ns: int = 0
    cpu_pause_ns: int = 0
    cycles: int = 0
    census_checksum: str = ""
    outcome: str = OK


FIELDS = [f.name for f in dataclasses.fields(RunRecord)]
_INT_FIELDS = {"mutators", "workers", "heap_bytes", "repetition", "wall_total_ns",
               "wall_pause_ns", "cpu_total_ns", "cpu_pause_ns", "cycles"}


class CsvSink:
    """Appends records to a CSV file, writing the header for a new file."""

    def __init__(self, path):
        self.path = path
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=FIELDS)
        if fresh:
            self._writer.writeheader()
            self._fh.flush()

    def write(self, record):
        self._writer.writerow(dataclasses.asdict(record))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path):
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for name in _INT_FIELDS:
                row[name] = int(row[name])
            row["multiplier"] = float(row["multiplier"])
            records.append(RunRecord(**row))
    return records


def heap_size_for(min_heap, multiplier, mutators, rounding=SLAB_BYTES):
    """Heap bytes for a run: the minimum scaled by multiplier and mutator
    count, rounded up to a multiple of rounding (a slab by default)."""
    if multiplier < 1.0:
        raise ValueError("multiplier must be at least 1")
    if mutators < 1:
        raise ValueError("need at least one mutator")
    raw = min_heap * multiplier * mutators
    rounding = max(1, int(rounding))
    units = int(raw // rounding)
    if units * rounding < raw:
        units += 1
    return units * rounding


def make_params(benchmark, params=None):
    _, cls = WORKLOADS[benchmark]
    if isinstance(params, cls):
        return params
    return cls(**(params or {}))


@dataclass
class RunResult:
    record: RunRecord
    checksums: list
    heap_stats: dict
    extras: list
    error: str = ""


def run_once(benchmark, collector, heap_bytes, mutators=1, workers=1, evacuation=True,
             seed=0, timeout_s=DEFAULT_TIMEOUT_S, params=None, multiplier=1.0,
             repetition=0, **heap_options):
    """One benchmark run in a fresh heap.  Failures become outcomes."""
    fn, _ = WORKLOADS[benchmark]
    params = make_params(benchmark, params)
    if collector == "semi" and mutators != 1:
        raise ValueError("the semi-space collector runs exactly one mutator")
    options = dict(heap_options)
    if collector == "mmc":
        options.update(workers=workers, evacuation=evacuation)
    heap = create_heap(collector, heap_bytes, **options)
    record = RunRecord(benchmark=benchmark, collector=collector, mutators=mutators,
                       workers=workers if collector == "mmc" else 1,
                       heap_bytes=heap_bytes, multiplier=multiplier,
                       repetition=repetition)
    results = [None] * mutators
    failures = []
    deadline = time.perf_counter() + timeout_s if timeout_s else None
    handles = []
    ready = threading.Barrier(mutators)

    def body(i):
        m = None
        try:
            # Attach only once every instance is ready: an attached mutator
            # blocked outside a safepoint would stall a collection.
            if mutators > 1:
                ready.wait()
            m = heap.attach()
            m.deadline = deadline
            handles.append(m)
            results[i] = fn(m, params, seed=seed)
        except HeapExhausted as exc:
            failures.append((HEAP_EXHAUSTED, str(exc)))
        except BenchTimeout as exc:
            failures.append((TIMEOUT, str(exc)))
        except threading.BrokenBarrierError:
            failures.append((TIMEOUT, "start barrier broken"))
        finally:
            if failures:
                # Stop the other instances at their next deadline check.
                for h in handles:
                    h.deadline = 0
                ready.abort()
            if m is not None:
                heap.detach(m)

    wall0 = time.perf_counter_ns()
    cpu0 = time.process_time_ns()
    if mutators == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(i,)) for i in range(mutators)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    record.wall_total_ns = time.perf_counter_ns() - wall0
    record.cpu_total_ns = time.process_time_ns() - cpu0
    record.wall_pause_ns = heap.pause_wall_ns
    record.cpu_pause_ns = heap.pause_cpu_ns
    record.cycles = len(heap.cycles)
    error = ""
    if failures:
        # A timeout caused by another instance's failure is not the cause.
        causes = [f for f in failures if f[0] == HEAP_EXHAUSTED] or failures
        record.outcome, error = causes[0]
        record.census_checksum = ""
    else:
        sums = sorted({r.checksum for r in results})
        record.census_checksum = "|".join(sums)
    return RunResult(record=record,
                     checksums=[r.checkpoints if r else None for r in results],
                     heap_stats=heap.statistics(),
                     extras=[r.extra if r else None for r in results],
                     error=error)


# -- minimum heap ----------------------------------------------------------------

def known_overhead(collector, heap_bytes, los_bytes=0):
    """Bytes of a heap the collector spends on itself rather than objects:
    block metadata for mmc, the copy reserve for semi."""
    if collector == "mmc":
        blocks = heap_bytes // BLOCK_FOOTPRINT
        return heap_bytes - blocks * (BLOCK_FOOTPRINT - 4096)
    if collector == "semi":
        return max(0, heap_bytes - los_bytes) // 2
    raise ValueError(f"unknown collector {collector!r}")


@dataclass
class MinHeap:
    benchmark: str
    collector: str
    bytes: int
    overhead: int
    probes: int

    @property
    def net(self):
        return self.bytes - self.overhead


def find_min_heap(benchmark, collector, params=None, granularity=BLOCK_FOOTPRINT,
                  seed=0, timeout_s=DEFAULT_TIMEOUT_S, start=4 * 1024 * 1024,
                  limit=1 << 34, **options):
    """Smallest multiple of granularity at which one run succeeds."""
    probes = 0
    los_seen = {}

    def succeeds(units):
        nonlocal probes
        probes += 1
        r = run_once(benchmark, collector, units * granularity, seed=seed,
                     timeout_s=timeout_s, params=params, **options)
        if r.record.outcome == TIMEOUT:
            raise BenchTimeout(f"{benchmark} timed out while sizing the heap")
        los_seen[units] = r.heap_stats.get("los_bytes", 0)
        return r.record.outcome == OK

    hi = max(1, start // granularity)
    while not succeeds(hi):
        hi *= 2
        if hi * granularity > limit:
            raise HeapExhausted(f"{benchmark} fails even in {limit} bytes")
    lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if succeeds(mid):
            hi = mid
        else:
            lo = mid
    size = hi * granularity
    return MinHeap(benchmark, collector, size,
                   known_overhead(collector, size, los_seen.get(hi, 0)), probes)


def benchmark_min_heap(benchmark, params=None, collectors=("mmc", "semi"), **kw):
    """The benchmark's minimum: the smallest measured minimum of any
    collector, less that collector's known overhead."""
    found = [find_min_heap(benchmark, c, params=params, **kw) for c in collectors]
    return min(f.net for f in found), found


# -- matrix ----------------------------------------------------------------------

@dataclass
class MatrixConfig:
    benchmarks: list
    multipliers: list
    collectors: list
    mutators: list = dataclasses.field(default_factory=lambda: [1])
    workers: list = dataclasses.field(default_factory=lambda: [1])
    reps: int = 10
    seed: int = 0
    timeout_s: float = DEFAULT_TIMEOUT_S
    evacuation: bool = True
    params: dict = dataclasses.field(default_factory=dict)
    min_heaps: dict = dataclasses.field(default_factory=dict)
    heap_rounding: int = SLAB_BYTES
    # Extra MmcHeap options, such as fragmentation_threshold.
    heap_options: dict = dataclasses.field(default_factory=dict)


def run_matrix(config, sink=None, on_record=None):
    """Run every cell reps times, each in a fresh heap.

    Failed runs are kept as records with their outcome.  Minimum heaps
    missing from config.min_heaps are measured first.
    """
    records = []
    for bench in config.benchmarks:
        params = config.params.get(bench)
        min_heap = config.min_heaps.get(bench)
        if min_heap is None:
            min_heap, _ = benchmark_min_heap(bench, params=params, seed=config.seed,
                                             timeout_s=config.timeout_s)
            config.min_heaps[bench] = min_heap
        for collector in config.collectors:
            for mutators in config.mutators:
                if collector == "semi" and mutators != 1:
                    continue
                worker_counts = config.workers if collector == "mmc" else [1]
                for workers in worker_counts:
                    for mult in config.multipliers:
                        heap_bytes = heap_size_for(min_heap, mult, mutators,
                                                   config.heap_rounding)
                        for rep in range(config.reps):
                            r = run_once(bench, collector, heap_bytes, mutators=mutators,
                                         workers=workers, evacuation=config.evacuation,
                                         seed=config.seed, timeout_s=config.timeout_s,
                                         params=params, multiplier=mult, repetition=rep,
                                         **(config.heap_options if collector == "mmc"
                                            else {}))
                            records.append(r.record)
                            if sink is not None:
                                sink.write(r.record)
                            if on_record is not None:
                                on_record(r.record)
    return records
