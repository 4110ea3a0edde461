"""Parallel stop-the-world tracing for the mostly-marking collector.

Each worker drains a bounded local FIFO.  When the FIFO fills, half of it
spills to the worker's shared deque, where idle workers can steal it.
Objects in evacuation candidate blocks are copied into reserve blocks when
the reserve allows, and marked in place otherwise.
"""

import logging
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .embedder import BUSY, FORWARD_TAG, field_span, forwarding_word, size_from_header
from .errors import HeapCorruption
from .geometry import (BLOCK_SHIFT, GRANULE_SHIFT, LOS_BASE, META_OFFSET, NOFL_BASE,
                       PAYLOAD_OFFSET, SLAB_SHIFT)
from .kernels import try_mark
from .metabyte import PINNED
from .nofl_space import AllocatorCore, Purpose

log = logging.getLogger("nofl.gc")

FIFO_CAPACITY = 256


class StealDeque:
    """Work-stealing deque: the owner pushes and pops at one end, thieves
    take from the other.  CPython's deque makes each end operation atomic."""

    __slots__ = ("_items",)

    def __init__(self):
        self._items = deque()

    def push(self, item):
        self._items.append(item)

    def pop(self):
        try:
            return self._items.pop()
        except IndexError:
            return None

    def steal(self):
        try:
            return self._items.popleft()
        except IndexError:
            return None

    def __len__(self):
        return len(self._items)


class TraceWorker:
    def __init__(self, ident, seed=0):
        self.id = ident
        self.fifo = deque()
        self.deque = StealDeque()
        self.core = AllocatorCore()
        self.rng = random.Random(seed * 1000003 + ident)
        self.processed = 0
        self.newly_marked = 0
        self.evacuated = 0
        self.fallbacks = 0
        self.steals = 0
        self.live = {}


@dataclass
class CollectionCycle:
    reason: str
    epoch_before: int
    epoch_after: int
    workers: int = 1
    roots: int = 0
    marked: int = 0
    processed: int = 0
    evacuated: int = 0
    fallbacks: int = 0
    steals: int = 0
    candidates: int = 0
    empty_blocks: int = 0
    unswept_blocks: int = 0
    fragmentation_granules: int = 0
    live_bytes: int = 0
    los_freed: int = 0
    pause_wall_ns: int = 0
    pause_cpu_ns: int = 0
    forwarded: list = field(default_factory=list, repr=False)


class Tracer:
    def __init__(self, heap, workers=1, fifo_capacity=FIFO_CAPACITY,
                 record_forwarding=False, seed=0):
        self.space = heap.space
        self.los = heap.los
        self.slabs = heap.space.slabs
        self.nofl_limit = heap.space.limit
        self.epoch = heap.space.epoch
        self.capacity = fifo_capacity
        self.workers = [TraceWorker(i, seed) for i in range(workers)]
        self.idle = 0
        self.terminated = False
        self._cond = threading.Condition()
        self._evac_lock = threading.Lock()
        self.forwarded = [] if record_forwarding else None

    # -- worklists -----------------------------------------------------------

    def push(self, w, obj):
        fifo = w.fifo
        if len(fifo) >= self.capacity:
            self._spill(w, self.capacity >> 1)
        fifo.append(obj)

    def _spill(self, w, n):
        fifo = w.fifo
        d = w.deque
        for _ in range(n):
            d.push(fifo.popleft())
        if self.idle:
            with self._cond:
                self._cond.notify_all()

    def steal_or_terminate(self, w):
        """Steal one item, or return None once every worker is idle and
        every deque is empty."""
        others = [x for x in self.workers if x is not w]
        workers = self.workers
        n = len(workers)
        while True:
            w.rng.shuffle(others)
            for victim in others:
                item = victim.deque.steal()
                if item is not None:
                    w.steals += 1
                    return item
            with self._cond:
                self.idle += 1
                while True:
                    if self.terminated:
                        return None
                    if any(len(x.deque) for x in workers):
                        self.idle -= 1
                        break
                    if self.idle == n:
                        self.terminated = True
                        self._cond.notify_all()
                        return None
                    self._cond.wait(0.001)

    # -- marking ---------------------------------------------------------------

    def trace_value(self, v, w):
        """Visit one reference; return its (possibly forwarded) value."""
        if v >= LOS_BASE:
            if self.los.mark_large(v, self.epoch):
                w.newly_marked += 1
                self.push(w, v)
            return v
        if not NOFL_BASE <= v < self.nofl_limit:
            raise HeapCorruption(f"reference {v:#x} lies outside every space")
        slab = self.slabs[(v - NOFL_BASE) >> SLAB_SHIFT]
        g = (v - slab.base - PAYLOAD_OFFSET) >> GRANULE_SHIFT
        if g < 0 or v & 15:
            raise HeapCorruption(f"reference {v:#x} is not a payload granule")
        block = slab.blocks[g >> 12]
        if block.evacuating:
            return self._visit_candidate(v, slab, g, block, w)
        r = try_mark(slab.buf, META_OFFSET + g, self.epoch)
        if r == 1:
            slab.buf[block.index] = 1
            w.newly_marked += 1
            self.push(w, v)
        elif r < 0:
            raise HeapCorruption(f"reference {v:#x} is not an object start")
        return v

    def _visit_candidate(self, v, slab, g, block, w):
        words = slab.words
        buf = slab.buf
        wi = (v - slab.base) >> 3
        mi = META_OFFSET + g
        epoch = self.epoch
        while True:
            with self._evac_lock:
                w0 = words[wi]
                if w0 & 0xFF == FORWARD_TAG:
                    return w0 >> 8
                if w0 != BUSY:
                    b = buf[mi]
                    state = b & 7
                    if state == epoch:
                        return v
                    if state == 0:
                        raise HeapCorruption(f"reference {v:#x} is not an object start")
                    if b & PINNED or not block.evac_allowed:
                        buf[mi] = (b & 0xF8) | epoch
                        buf[block.index] = 1
                        w.newly_marked += 1
                        self.push(w, v)
                        return v
                    words[wi] = BUSY
                    break
            # Another worker holds the claim; its copy is short.
            time.sleep(0)
        nbytes = size_from_header(w0)
        new = self.space.allocate(w.core, nbytes, Purpose.EVACUATION)
        if new is None:
            block.evac_allowed = False
            with self._evac_lock:
                buf[mi] = (buf[mi] & 0xF8) | epoch
                buf[block.index] = 1
                words[wi] = w0
            w.fallbacks += 1
            w.newly_marked += 1
            self.push(w, v)
            return v
        dslab = self.slabs[(new - NOFL_BASE) >> SLAB_SHIFT]
        dwi = (new - dslab.base) >> 3
        dwords = dslab.words
        dwords[dwi:dwi + (nbytes >> 3)] = words[wi:wi + (nbytes >> 3)]
        dwords[dwi] = w0
        dg = (new - dslab.base - PAYLOAD_OFFSET) >> GRANULE_SHIFT
        dbuf = dslab.buf
        dbuf[META_OFFSET + dg] = (dbuf[META_OFFSET + dg] & 0xF8) | epoch
        dbuf[dg >> 12] = 1
        words[wi] = forwarding_word(new)
        w.evacuated += 1
        w.newly_marked += 1
        if self.forwarded is not None:
            self.forwarded.append((v, new))
        self.push(w, new)
        return new

    def trace_object(self, obj, w):
        w.processed += 1
        if obj >= LOS_BASE:
            words = self.los.objects[obj].words
            wi = 0
            w0 = words[0]
        else:
            slab = self.slabs[(obj - NOFL_BASE) >> SLAB_SHIFT]
            off = obj - slab.base
            words = slab.words
            wi = off >> 3
            w0 = words[wi]
            block = slab.blocks[(off - PAYLOAD_OFFSET) >> BLOCK_SHIFT]
            live = w.live
            live[block] = live.get(block, 0) + (size_from_header(w0) >> GRANULE_SHIFT)
        start, count = field_span(w0)
        trace_value = self.trace_value
        for k in range(wi + start, wi + start + count):
            v = words[k]
            if v and not v & 7:
                nv = trace_value(v, w)
                if nv != v:
                    words[k] = nv

    # -- driving -----------------------------------------------------------------

    def scan_roots(self, root_lists):
        """Seed worker 0 from each list of root slots, rewriting moved ones."""
        w = self.workers[0]
        count = 0
        for slots in root_lists:
            for i, v in enumerate(slots):
                if v and not v & 7:
                    count += 1
                    nv = self.trace_value(v, w)
                    if nv != v:
                        slots[i] = nv
        return count

    def _work(self, w):
        fifo = w.fifo
        own = w.deque
        trace_object = self.trace_object
        while True:
            if fifo:
                obj = fifo.popleft()
                if self.idle and len(fifo) > 1 and not len(own):
                    self._spill(w, len(fifo) >> 1)
            else:
                obj = own.pop()
                if obj is None:
                    obj = self.steal_or_terminate(w)
                    if obj is None:
                        return
            trace_object(obj, w)

    def run(self):
        errors = []

        def body(worker):
            try:
                self._work(worker)
            except BaseException as exc:
                errors.append(exc)
                with self._cond:
                    self.terminated = True
                    self._cond.notify_all()

        threads = [threading.Thread(target=body, args=(w,), daemon=True)
                   for w in self.workers[1:]]
        for t in threads:
            t.start()
        body(self.workers[0])
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    def release_cores(self):
        for w in self.workers:
            self.space.release(w.core)

    def live_counts(self):
        merged = {}
        for w in self.workers:
            for block, n in w.live.items():
                merged[block] = merged.get(block, 0) + n
        return merged


def run_cycle(heap, reason):
    """One complete collection of an MmcHeap.  The world must be stopped."""
    t_wall = time.perf_counter_ns()
    t_cpu = time.process_time_ns()
    space = heap.space
    for m in heap.mutators:
        space.release(m.core)
    before = space.epoch
    plan = space.prepare_cycle()
    tracer = Tracer(heap, heap.workers, record_forwarding=heap.record_forwarding,
                    seed=len(heap.cycles))
    cycle = CollectionCycle(reason=reason, epoch_before=before, epoch_after=space.epoch,
                            workers=heap.workers, candidates=len(plan.candidates))
    cycle.roots = tracer.scan_roots(heap.root_lists())
    tracer.run()
    tracer.release_cores()
    cycle.los_freed = heap.los.sweep_los(space.epoch)
    summary = space.finish_cycle(tracer.live_counts())
    for w in tracer.workers:
        cycle.marked += w.newly_marked
        cycle.processed += w.processed
        cycle.evacuated += w.evacuated
        cycle.fallbacks += w.fallbacks
        cycle.steals += w.steals
    cycle.empty_blocks = summary.empty
    cycle.unswept_blocks = summary.unswept
    cycle.fragmentation_granules = summary.fragmentation_granules
    cycle.live_bytes = (summary.live_granules << GRANULE_SHIFT) + heap.los.bytes
    if tracer.forwarded is not None:
        cycle.forwarded = tracer.forwarded
    heap.after_cycle(cycle)
    cycle.pause_wall_ns = time.perf_counter_ns() - t_wall
    cycle.pause_cpu_ns = time.process_time_ns() - t_cpu
    heap.record_cycle(cycle)
    if heap.verbose:
        log.info("gc %d epoch=%d marked=%d evacuated=%d pause_wall_ns=%d pause_cpu_ns=%d",
                 len(heap.cycles), cycle.epoch_after, cycle.marked, cycle.evacuated,
                 cycle.pause_wall_ns, cycle.pause_cpu_ns)
    return cycle
