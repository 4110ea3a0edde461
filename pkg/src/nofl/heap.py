"""Heaps: mutator attachment, the stop-the-world handshake, and the
mostly-marking collector's allocation paths and sizing."""

import logging
import threading

from .embedder import Mutator
from .errors import ContractViolation, HeapExhausted
from .geometry import (BLOCK_FOOTPRINT, GRANULE_SHIFT, GRANULES_PER_BLOCK,
                       LARGE_OBJECT_THRESHOLD, LOS_BASE, NOFL_BASE, PAYLOAD_OFFSET,
                       SLAB_SHIFT)
from .los import LargeObjectSpace, page_round
from .metabyte import PINNED
from .nofl_space import AllocatorCore, BlockState, NoflSpace, object_extents

log = logging.getLogger("nofl.gc")

POISON = 0xDB
_POISON_BLOCK = bytes([POISON]) * (GRANULES_PER_BLOCK * 16)


class Heap:
    """Collector-independent plumbing shared by every heap.

    Mutators stop cooperatively: a collecting thread raises
    ``stop_requested`` and waits until every other attached mutator has
    parked at a safepoint.
    """

    collector = "abstract"
    alignment = 16
    max_mutators = None

    def __init__(self, heap_bytes, workers=1, verbose=False, poison=False,
                 record_forwarding=False):
        if heap_bytes <= 0:
            raise ContractViolation("heap size must be positive")
        self.heap_bytes = int(heap_bytes)
        self.workers = max(1, int(workers))
        self.verbose = verbose
        self.poison = poison
        self.record_forwarding = record_forwarding
        self.los = LargeObjectSpace()
        self.mutators = []
        self.cycles = []
        self.stop_requested = False
        self.parked = 0
        self.pause_wall_ns = 0
        self.pause_cpu_ns = 0
        self._cond = threading.Condition()
        self._next_id = 0
        self._global_names = {}
        self._global_slots = []

    # -- mutators ------------------------------------------------------------

    def attach(self):
        with self._cond:
            while self.stop_requested:
                self._cond.wait()
            if self.max_mutators is not None and len(self.mutators) >= self.max_mutators:
                raise ContractViolation(f"{self.collector} supports {self.max_mutators} mutator")
            m = Mutator(self, self._next_id)
            m.core = AllocatorCore()
            self._next_id += 1
            self.mutators.append(m)
            return m

    def detach(self, m):
        with self._cond:
            if self.stop_requested:
                self._wait_parked()
            self._retire(m)
            self.mutators.remove(m)
            self._cond.notify_all()

    def _retire(self, m):
        pass

    def park(self, m):
        with self._cond:
            if self.stop_requested:
                self._wait_parked()

    def _wait_parked(self):
        self.parked += 1
        self._cond.notify_all()
        while self.stop_requested:
            self._cond.wait()
        self.parked -= 1

    def collect(self, m, reason="explicit"):
        """Run a collection, or wait out one another mutator started.

        Returns True if this call performed the collection.
        """
        with self._cond:
            if self.stop_requested:
                self._wait_parked()
                return False
            self.stop_requested = True
            while self.parked < len(self.mutators) - 1:
                self._cond.wait()
        try:
            self._run_cycle(reason)
        finally:
            with self._cond:
                self.stop_requested = False
                self._cond.notify_all()
        return True

    def _run_cycle(self, reason):
        raise NotImplementedError

    # -- roots ---------------------------------------------------------------

    def register_root(self, name, value=0):
        if name not in self._global_names:
            self._global_names[name] = len(self._global_slots)
            self._global_slots.append(value)
        else:
            self._global_slots[self._global_names[name]] = value

    def root(self, name):
        return self._global_slots[self._global_names[name]]

    def set_root(self, name, value):
        self._global_slots[self._global_names[name]] = value

    def root_lists(self):
        return [m.stack for m in self.mutators] + [self._global_slots]

    # -- accounting ----------------------------------------------------------

    def record_cycle(self, cycle):
        self.cycles.append(cycle)
        self.pause_wall_ns += cycle.pause_wall_ns
        self.pause_cpu_ns += cycle.pause_cpu_ns

    def statistics(self):
        return {
            "collector": self.collector,
            "heap_bytes": self.heap_bytes,
            "cycles": len(self.cycles),
            "pause_wall_ns": self.pause_wall_ns,
            "pause_cpu_ns": self.pause_cpu_ns,
            "los_bytes": self.los.bytes,
            "los_objects": len(self.los.objects),
            "live_bytes": self.cycles[-1].live_bytes if self.cycles else 0,
        }


class MmcHeap(Heap):
    """The mostly-marking collector: Nofl space plus a large object space.

    The heap budget covers block payload, block metadata and large objects.
    With the grow sizing policy the budget rises after a cycle so that
    live bytes times the multiplier fit.
    """

    collector = "mmc"
    alignment = 16

    def __init__(self, heap_bytes, workers=1, evacuation=True, sizing="fixed",
                 multiplier=2.0, fragmentation_threshold=0.10, reserve_fraction=0.02,
                 **kw):
        super().__init__(heap_bytes, workers, **kw)
        if sizing not in ("fixed", "grow"):
            raise ContractViolation(f"unknown sizing policy {sizing!r}")
        self.sizing = sizing
        self.multiplier = multiplier
        self.space = NoflSpace(evacuation, fragmentation_threshold, reserve_fraction)
        self._slabs = self.space.slabs
        self._budget_lock = threading.Lock()
        self._pin_lock = threading.Lock()
        self.space.grow(self.heap_bytes // BLOCK_FOOTPRINT)
        self.space.refill_reserve()

    # -- addressing ------------------------------------------------------------

    def locate(self, addr):
        """(word view, word index) of the object at addr."""
        if addr >= LOS_BASE:
            return self.los.objects[addr].words, 0
        slab = self._slabs[(addr - NOFL_BASE) >> SLAB_SHIFT]
        return slab.words, (addr - slab.base) >> 3

    # -- allocation ------------------------------------------------------------

    def allocate_bytes(self, m, nbytes):
        if nbytes > LARGE_OBJECT_THRESHOLD:
            return self._allocate_large(m, nbytes)
        core = m.core
        n = (nbytes + 15) >> GRANULE_SHIFT
        a = core.alloc
        if core.sweep - a >= n and nbytes > 0:
            core.alloc = a + n
            buf = core.buf
            i = core.meta_base + a
            if n == 1:
                buf[i] = 33
            else:
                buf[i] = 1
                buf[i + n - 1] = 32
            return core.base + (a << GRANULE_SHIFT)
        return self._allocate_slow(m, nbytes)

    def _allocate_slow(self, m, nbytes):
        space = self.space
        while True:
            addr = space.allocate(m.core, nbytes)
            if addr is not None:
                return addr
            if self._grow_for_allocation():
                continue
            if not self.collect(m, "allocation"):
                continue
            addr = space.allocate(m.core, nbytes)
            if addr is not None:
                return addr
            if self._grow_for_allocation():
                continue
            raise HeapExhausted(f"no block free for {nbytes} bytes in a "
                                f"{self.heap_bytes}-byte heap")

    def _allocate_large(self, m, nbytes):
        rounded = page_round(nbytes)
        for attempt in range(2):
            with self._budget_lock:
                if self._make_room(rounded):
                    return self.los.allocate_large(nbytes)
            if attempt == 0:
                while not self.collect(m, "large allocation"):
                    pass
        raise HeapExhausted(f"no room for a {nbytes}-byte large object in a "
                            f"{self.heap_bytes}-byte heap")

    def _make_room(self, rounded):
        """Shrink the Nofl space until rounded more LOS bytes fit the budget."""
        if self.sizing == "grow":
            need = self.space.committed * BLOCK_FOOTPRINT + self.los.bytes + rounded
            self.heap_bytes = max(self.heap_bytes, need)
            return True
        over = self.space.committed * BLOCK_FOOTPRINT + self.los.bytes + rounded - self.heap_bytes
        if over > 0:
            self.space.shrink(-(-over // BLOCK_FOOTPRINT))
        return (self.space.committed * BLOCK_FOOTPRINT + self.los.bytes + rounded
                <= self.heap_bytes)

    def _grow_for_allocation(self):
        """Under the grow policy, add a block rather than fail."""
        if self.sizing != "grow":
            return False
        with self._budget_lock:
            self.heap_bytes += BLOCK_FOOTPRINT
            return self._rebalance() > 0

    def _rebalance(self):
        target = (self.heap_bytes - self.los.bytes) // BLOCK_FOOTPRINT
        have = self.space.committed
        if target > have:
            return self.space.grow(target - have)
        if target < have:
            self.space.shrink(have - target)
        return 0

    # -- pinning ---------------------------------------------------------------

    def _pin_byte(self, obj):
        slab, i = self.space.meta_index(obj)
        if obj & 15 or obj - slab.base < PAYLOAD_OFFSET or not slab.buf[i] & 7:
            raise ContractViolation(f"{obj:#x} is not an object")
        return slab.buf, i

    def pin(self, obj):
        if obj >= LOS_BASE:
            return
        with self._pin_lock:
            buf, i = self._pin_byte(obj)
            buf[i] |= PINNED

    def unpin(self, obj):
        if obj >= LOS_BASE:
            return
        with self._pin_lock:
            buf, i = self._pin_byte(obj)
            buf[i] &= ~PINNED & 0xFF

    def is_pinned(self, obj):
        if obj >= LOS_BASE:
            return True
        buf, i = self._pin_byte(obj)
        return bool(buf[i] & PINNED)

    # -- collection --------------------------------------------------------------

    def _retire(self, m):
        self.space.release(m.core)

    def _run_cycle(self, reason):
        from .tracer import run_cycle
        return run_cycle(self, reason)

    def after_cycle(self, cycle):
        """Sizing and bookkeeping once the trace and sweep are done."""
        with self._budget_lock:
            if self.sizing == "grow":
                want = int(cycle.live_bytes * self.multiplier)
                if want > self.heap_bytes:
                    self.heap_bytes = want
            self._rebalance()
            self.space.refill_reserve()
        if self.poison:
            self._poison_dead()

    def _poison_dead(self):
        """Overwrite every granule not covered by a surviving object."""
        epoch = self.space.epoch
        for block in self.space.all_blocks():
            slab = block.slab
            off = block.payload_offset
            if block.state is not BlockState.UNSWEPT:
                # Zeroed again when handed out, because of the dirty flag.
                slab.buf[off:off + GRANULES_PER_BLOCK * 16] = _POISON_BLOCK
                block.payload_dirty = True
                continue
            prev = 0
            for start, end in object_extents(block.meta, epoch, include_young=False):
                if start > prev:
                    n = (start - prev) * 16
                    slab.buf[off + prev * 16:off + start * 16] = bytes([POISON]) * n
                prev = end
            if prev < GRANULES_PER_BLOCK:
                n = (GRANULES_PER_BLOCK - prev) * 16
                slab.buf[off + prev * 16:off + GRANULES_PER_BLOCK * 16] = bytes([POISON]) * n

    def statistics(self):
        stats = super().statistics()
        stats["committed_blocks"] = self.space.committed
        stats["evacuated"] = sum(c.evacuated for c in self.cycles)
        return stats


def create_heap(collector, heap_bytes, **options):
    """Build a heap for the named collector ("mmc" or "semi")."""
    if collector == "mmc":
        return MmcHeap(heap_bytes, **options)
    if collector == "semi":
        from .semi import SemiHeap
        options.pop("evacuation", None)
        options.pop("workers", None)
        return SemiHeap(heap_bytes, **options)
    raise ContractViolation(f"unknown collector {collector!r}")
