"""Serial two-space copying collector with a Cheney scan.

Used as the oracle for the mostly-marking collector.  Objects are aligned
to 8 bytes.  Large objects live in the shared large object space, so only
small objects pay for the copy reserve.
"""

import time

from .embedder import FORWARD_TAG, field_span, forwarding_word, size_from_header
from .errors import ContractViolation, HeapCorruption, HeapExhausted
from .geometry import LARGE_OBJECT_THRESHOLD, LOS_BASE, SEMI_BASE
from .heap import POISON, Heap
from .los import page_round
from .tracer import CollectionCycle

REGION_SHIFT = 38


class Region:
    __slots__ = ("base", "buf", "words")

    def __init__(self, index, size):
        self.base = SEMI_BASE + (index << REGION_SHIFT)
        self.buf = bytearray(size)
        self.words = memoryview(self.buf).cast("Q")


class SemiHeap(Heap):
    collector = "semi"
    alignment = 8
    max_mutators = 1

    def __init__(self, heap_bytes, **kw):
        super().__init__(heap_bytes, workers=1, **kw)
        size = (self.heap_bytes // 2) & -8
        self.regions = [Region(0, size), Region(1, size)]
        self.active = 0
        self.cursor = 0

    @property
    def semispace_bytes(self):
        """Usable bytes of one semispace once large objects are paid for."""
        return max(0, ((self.heap_bytes - self.los.bytes) // 2) & -8)

    def locate(self, addr):
        if addr >= SEMI_BASE:
            region = self.regions[(addr - SEMI_BASE) >> REGION_SHIFT]
            return region.words, (addr - region.base) >> 3
        return self.los.objects[addr].words, 0

    def allocate_bytes(self, m, nbytes):
        if nbytes > LARGE_OBJECT_THRESHOLD:
            return self._allocate_large(m, nbytes)
        if nbytes < 1:
            raise ContractViolation("zero-sized allocation")
        size = (nbytes + 7) & -8
        for attempt in range(2):
            a = self.cursor
            if a + size <= self.semispace_bytes:
                self.cursor = a + size
                return self.regions[self.active].base + a
            if attempt == 0:
                self.collect(m, "allocation")
        raise HeapExhausted(f"semispace of {self.semispace_bytes} bytes cannot fit "
                            f"{nbytes} more bytes")

    def _allocate_large(self, m, nbytes):
        rounded = page_round(nbytes)
        for attempt in range(2):
            if self.cursor <= ((self.heap_bytes - self.los.bytes - rounded) // 2):
                return self.los.allocate_large(nbytes)
            if attempt == 0:
                self.collect(m, "large allocation")
        raise HeapExhausted(f"no room for a {nbytes}-byte large object")

    def pin(self, obj):
        if obj >= SEMI_BASE:
            raise ContractViolation("the copying collector cannot pin objects")

    def unpin(self, obj):
        if obj >= SEMI_BASE:
            raise ContractViolation("the copying collector cannot pin objects")

    def _run_cycle(self, reason):
        t_wall = time.perf_counter_ns()
        t_cpu = time.process_time_ns()
        from_region = self.regions[self.active]
        to_region = self.regions[1 - self.active]
        fbase = from_region.base
        fwords = from_region.words
        tbase = to_region.base
        twords = to_region.words
        limit = len(to_region.buf)
        los = self.los
        epoch = (len(self.cycles) & 1) + 1
        free = 0
        los_pending = []
        copied = 0

        def copy(v):
            nonlocal free, copied
            if v >= SEMI_BASE:
                wi = (v - fbase) >> 3
                if not 0 <= wi < len(fwords):
                    raise HeapCorruption(f"reference {v:#x} is outside from-space")
                w0 = fwords[wi]
                if w0 & 0xFF == FORWARD_TAG:
                    return w0 >> 8
                size = size_from_header(w0, 8)
                if free + size > limit:
                    raise HeapExhausted("to-space overflow while copying survivors")
                ti = free >> 3
                n = size >> 3
                twords[ti:ti + n] = fwords[wi:wi + n]
                new = tbase + free
                free += size
                copied += 1
                fwords[wi] = forwarding_word(new)
                return new
            if v >= LOS_BASE:
                if los.mark_large(v, epoch):
                    los_pending.append(v)
                return v
            raise HeapCorruption(f"reference {v:#x} lies outside every space")

        roots = 0
        for slots in self.root_lists():
            for i, v in enumerate(slots):
                if v and not v & 7:
                    roots += 1
                    slots[i] = copy(v)

        def scan(words, wi):
            w0 = words[wi]
            start, count = field_span(w0)
            for k in range(wi + start, wi + start + count):
                v = words[k]
                if v and not v & 7:
                    words[k] = copy(v)
            return size_from_header(w0, 8)

        scanned = 0
        while scanned < free or los_pending:
            while scanned < free:
                scanned += scan(twords, scanned >> 3)
            while los_pending:
                scan(los.objects[los_pending.pop()].words, 0)
        freed = los.sweep_los(epoch)

        # Fresh allocation expects zeroed memory past the survivors.
        to_region.buf[free:] = bytes(limit - free)
        if self.poison:
            from_region.buf[:] = bytes([POISON]) * len(from_region.buf)
        self.active = 1 - self.active
        self.cursor = free
        cycle = CollectionCycle(reason=reason, epoch_before=epoch, epoch_after=epoch,
                                roots=roots, marked=copied, processed=copied,
                                live_bytes=free + los.bytes, los_freed=freed)
        cycle.pause_wall_ns = time.perf_counter_ns() - t_wall
        cycle.pause_cpu_ns = time.process_time_ns() - t_cpu
        self.record_cycle(cycle)
        if free > self.semispace_bytes:
            raise HeapExhausted(f"{free} live bytes exceed the "
                                f"{self.semispace_bytes}-byte semispace")
        return cycle

    def statistics(self):
        stats = super().statistics()
        stats["semispace_bytes"] = self.semispace_bytes
        return stats
