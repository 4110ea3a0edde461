"""The Nofl space: blocks, lazily swept holes and evacuation planning."""

import enum
import threading
from collections import deque
from dataclasses import dataclass, field

from . import metabyte
from .errors import ContractViolation
from .geometry import (BLOCK_BYTES, BLOCK_SHIFT, BLOCKS_PER_SLAB, GRANULE_SHIFT,
                       GRANULES_PER_BLOCK, LARGE_OBJECT_THRESHOLD, META_OFFSET,
                       NOFL_BASE, PAYLOAD_OFFSET, SLAB_BYTES, SLAB_SHIFT)
from .kernels import next_hole

_ZEROS = memoryview(bytes(BLOCK_BYTES))
_PINNED_TABLE = bytes(1 if b & metabyte.PINNED else 0 for b in range(256))


class BlockState(enum.Enum):
    EMPTY = "empty"
    UNSWEPT = "unswept"
    SWEEPING = "sweeping"
    FULL = "full"
    EVACUATION_RESERVE = "evacuation_reserve"
    UNAVAILABLE = "unavailable"


class Purpose(enum.Enum):
    MUTATOR = "mutator"
    EVACUATION = "evacuation"


class Block:
    __slots__ = ("slab", "index", "base", "meta_base", "payload_offset", "state",
                 "fragmentation_granules", "hole_granules", "holes_found",
                 "allocated_granules", "live_granules", "sweeps",
                 "evacuating", "evac_allowed", "payload_dirty")

    def __init__(self, slab, index):
        self.slab = slab
        self.index = index
        self.payload_offset = PAYLOAD_OFFSET + index * BLOCK_BYTES
        self.base = slab.base + self.payload_offset
        self.meta_base = META_OFFSET + index * GRANULES_PER_BLOCK
        self.state = BlockState.UNAVAILABLE
        self.fragmentation_granules = 0
        self.hole_granules = 0
        self.holes_found = 0
        self.allocated_granules = 0
        # Survivor granules counted by the most recent trace.
        self.live_granules = 0
        # Number of find_next_hole scans over this block; instrumentation.
        self.sweeps = 0
        self.evacuating = False
        self.evac_allowed = False
        self.payload_dirty = False

    # The block mark lives in the slab header, one byte per block.
    @property
    def block_mark(self):
        return self.slab.buf[self.index] != 0

    @block_mark.setter
    def block_mark(self, value):
        self.slab.buf[self.index] = 1 if value else 0

    @property
    def meta(self):
        return self.slab.buf[self.meta_base:self.meta_base + GRANULES_PER_BLOCK]

    def has_pinned(self):
        return self.meta.translate(_PINNED_TABLE).find(1) >= 0

    def reset_counters(self):
        self.fragmentation_granules = 0
        self.hole_granules = 0
        self.holes_found = 0
        self.allocated_granules = 0

    def __repr__(self):
        return f"<Block {self.base:#x} {self.state.value}>"


class Slab:
    __slots__ = ("index", "base", "buf", "words", "blocks")

    def __init__(self, index):
        self.index = index
        self.base = NOFL_BASE + index * SLAB_BYTES
        self.buf = bytearray(SLAB_BYTES)
        self.words = memoryview(self.buf).cast("Q")
        self.blocks = [Block(self, i) for i in range(BLOCKS_PER_SLAB)]


class AllocatorCore:
    """Bump allocator over one block.  Cursors are block-relative granules."""

    __slots__ = ("block", "alloc", "sweep", "hole_start", "buf", "meta_base", "base")

    def __init__(self):
        self.block = None
        self.alloc = self.sweep = self.hole_start = GRANULES_PER_BLOCK
        self.buf = None
        self.meta_base = 0
        self.base = 0

    def attach(self, block, fresh):
        self.block = block
        self.buf = block.slab.buf
        self.meta_base = block.meta_base
        self.base = block.base
        self.alloc = self.hole_start = 0
        self.sweep = GRANULES_PER_BLOCK if fresh else 0

    def detach(self):
        block = self.block
        if block is not None:
            block.allocated_granules += self.alloc - self.hole_start
        self.block = None
        self.buf = None
        self.alloc = self.sweep = self.hole_start = GRANULES_PER_BLOCK
        return block


class BlockLists:
    """Shared block queues.  Each pop hands a block to exactly one caller."""

    LISTED = (BlockState.EMPTY, BlockState.UNSWEPT, BlockState.FULL,
              BlockState.EVACUATION_RESERVE, BlockState.UNAVAILABLE)

    def __init__(self):
        self._lock = threading.Lock()
        self._lists = {state: deque() for state in self.LISTED}

    def push(self, block, state):
        with self._lock:
            block.state = state
            self._lists[state].append(block)

    def pop(self, state, new_state=BlockState.SWEEPING):
        with self._lock:
            try:
                block = self._lists[state].popleft()
            except IndexError:
                return None
            block.state = new_state
            return block

    def take_all(self, state):
        with self._lock:
            blocks = list(self._lists[state])
            self._lists[state].clear()
            return blocks

    def count(self, state):
        return len(self._lists[state])

    def blocks(self, state):
        with self._lock:
            return list(self._lists[state])


@dataclass
class EvacuationPlan:
    epoch: int
    candidates: list = field(default_factory=list)
    reserve_blocks: int = 0
    fragmentation: float = 0.0
    triggered: bool = False


@dataclass
class ReclamationSummary:
    empty: int
    unswept: int
    fragmentation_granules: int
    live_granules: int


class NoflSpace:
    def __init__(self, evacuation=True, fragmentation_threshold=0.10,
                 reserve_fraction=0.02):
        self.slabs = []
        self.lists = BlockLists()
        self.epoch = 2
        self.evacuation = evacuation
        self.fragmentation_threshold = fragmentation_threshold
        self.reserve_fraction = reserve_fraction
        self.committed = 0
        self._grow_lock = threading.Lock()

    # -- layout ---------------------------------------------------------

    @property
    def limit(self):
        return NOFL_BASE + len(self.slabs) * SLAB_BYTES

    def contains(self, address):
        return NOFL_BASE <= address < self.limit

    def slab_for(self, address):
        return self.slabs[(address - NOFL_BASE) >> SLAB_SHIFT]

    def block_for(self, address):
        slab = self.slabs[(address - NOFL_BASE) >> SLAB_SHIFT]
        return slab.blocks[(address - slab.base - PAYLOAD_OFFSET) >> BLOCK_SHIFT]

    def meta_index(self, address):
        """(slab, index into slab.buf) of an object's metadata byte."""
        slab = self.slabs[(address - NOFL_BASE) >> SLAB_SHIFT]
        return slab, META_OFFSET + ((address - slab.base - PAYLOAD_OFFSET) >> GRANULE_SHIFT)

    def all_blocks(self):
        for slab in self.slabs:
            yield from slab.blocks

    def active_blocks(self):
        return self.committed

    def grow(self, n):
        """Make n more blocks available, mapping slabs as needed."""
        with self._grow_lock:
            added = 0
            while added < n:
                block = self.lists.pop(BlockState.UNAVAILABLE, BlockState.EMPTY)
                if block is None:
                    slab = Slab(len(self.slabs))
                    self.slabs.append(slab)
                    for b in slab.blocks:
                        self.lists.push(b, BlockState.UNAVAILABLE)
                    continue
                self.lists.push(block, BlockState.EMPTY)
                added += 1
            self.committed += added
            return added

    def shrink(self, n):
        """Return up to n empty blocks to the unavailable pool."""
        released = 0
        while released < n:
            block = self.lists.pop(BlockState.EMPTY, BlockState.UNAVAILABLE)
            if block is None:
                break
            self.lists.push(block, BlockState.UNAVAILABLE)
            released += 1
        self.committed -= released
        return released

    # -- allocation -------------------------------------------------------

    def acquire_block(self, core, purpose=Purpose.MUTATOR):
        """Hand a block to core, or return None when none is available.

        Mutators prefer unswept blocks and fall back to empty ones, which
        are bump-allocated without sweeping.  Evacuation only draws on the
        reserve.
        """
        if purpose is Purpose.EVACUATION:
            block = self.lists.pop(BlockState.EVACUATION_RESERVE)
            fresh = True
        else:
            block = self.lists.pop(BlockState.UNSWEPT)
            fresh = False
            if block is None:
                block = self.lists.pop(BlockState.EMPTY)
                fresh = True
        if block is None:
            return None
        if fresh and block.payload_dirty:
            off = block.payload_offset
            block.slab.buf[off:off + BLOCK_BYTES] = _ZEROS
            block.payload_dirty = False
        core.attach(block, fresh)
        return block

    def release(self, core, state=BlockState.FULL):
        block = core.detach()
        if block is not None:
            self.lists.push(block, state)

    def allocate(self, core, nbytes, purpose=Purpose.MUTATOR):
        """Allocate nbytes (rounded to granules) through core.

        Returns the object address, or None when the space has no block
        to offer and a collection is needed.
        """
        if nbytes < 1:
            raise ContractViolation("zero-sized allocation")
        if nbytes > LARGE_OBJECT_THRESHOLD:
            raise ContractViolation(f"{nbytes} bytes belongs in the large object space")
        n = (nbytes + 15) >> GRANULE_SHIFT
        while True:
            if core.block is not None:
                a = core.alloc
                if core.sweep - a >= n:
                    core.alloc = a + n
                    buf = core.buf
                    i = core.meta_base + a
                    if n == 1:
                        buf[i] = 33
                    else:
                        buf[i] = 1
                        buf[i + n - 1] = 32
                    return core.base + (a << GRANULE_SHIFT)
                if self.find_next_hole(core):
                    continue
                self.release(core)
            if self.acquire_block(core, purpose) is None:
                return None

    def find_next_hole(self, core):
        """Advance core to the next hole of its block.

        Returns False when the block has no further hole.
        """
        block = core.block
        a, s = core.alloc, core.sweep
        if s > a:
            block.fragmentation_granules += s - a
        block.allocated_granules += a - core.hole_start
        if s >= GRANULES_PER_BLOCK:
            core.alloc = core.hole_start = GRANULES_PER_BLOCK
            return False
        block.sweeps += 1
        buf = core.buf
        base = core.meta_base
        a, s = next_hole(buf, base, GRANULES_PER_BLOCK, s, self.epoch)
        core.alloc = core.hole_start = a
        core.sweep = s
        if a >= GRANULES_PER_BLOCK:
            return False
        n = s - a
        buf[base + a:base + s] = _ZEROS[:n]
        off = block.payload_offset + (a << GRANULE_SHIFT)
        buf[off:off + (n << GRANULE_SHIFT)] = _ZEROS[:n << GRANULE_SHIFT]
        block.holes_found += 1
        block.hole_granules += n
        return True

    # -- collection cycle ---------------------------------------------------

    def reserve_target(self):
        if not self.evacuation:
            return 0
        return max(1, int(self.reserve_fraction * self.active_blocks()))

    def refill_reserve(self):
        want = self.reserve_target() - self.lists.count(BlockState.EVACUATION_RESERVE)
        while want > 0:
            block = self.lists.pop(BlockState.EMPTY, BlockState.EVACUATION_RESERVE)
            if block is None:
                break
            self.lists.push(block, BlockState.EVACUATION_RESERVE)
            want -= 1
        while want < 0:
            block = self.lists.pop(BlockState.EVACUATION_RESERVE, BlockState.EMPTY)
            self.lists.push(block, BlockState.EMPTY)
            want += 1

    @staticmethod
    def live_estimate(block):
        return block.live_granules

    def prepare_cycle(self):
        """Rotate the mark epoch and choose evacuation candidates.

        Must run with the world stopped and every allocator detached.
        """
        self.epoch = metabyte.rotate(self.epoch)
        plan = EvacuationPlan(epoch=self.epoch)
        in_use = self.lists.blocks(BlockState.UNSWEPT) + self.lists.blocks(BlockState.FULL)
        for block in in_use:
            block.evacuating = block.evac_allowed = False
        reserve = self.lists.count(BlockState.EVACUATION_RESERVE)
        plan.reserve_blocks = reserve
        if in_use:
            total = sum(b.fragmentation_granules for b in in_use)
            plan.fragmentation = total / (len(in_use) * GRANULES_PER_BLOCK)
        if self.evacuation and reserve and plan.fragmentation >= self.fragmentation_threshold:
            plan.triggered = True
            floor = self.fragmentation_threshold * GRANULES_PER_BLOCK
            ranked = sorted((b for b in in_use if b.fragmentation_granules >= floor),
                            key=lambda b: -b.fragmentation_granules)
            budget = reserve * GRANULES_PER_BLOCK
            for block in ranked:
                if block.has_pinned():
                    continue
                estimate = self.live_estimate(block)
                if estimate > budget:
                    break
                budget -= estimate
                block.evacuating = block.evac_allowed = True
                plan.candidates.append(block)
        for block in in_use:
            block.live_granules = 0
        return plan

    def finish_cycle(self, live_counts=None):
        """Sort traced blocks into empty and unswept by their block marks.

        live_counts optionally maps blocks to survivor granules from the trace.
        """
        live_counts = live_counts or {}
        empty = unswept = frag = live = 0
        blocks = self.lists.take_all(BlockState.FULL) + self.lists.take_all(BlockState.UNSWEPT)
        for block in blocks:
            frag += block.fragmentation_granules
            block.reset_counters()
            block.evacuating = block.evac_allowed = False
            slab = block.slab
            if slab.buf[block.index]:
                slab.buf[block.index] = 0
                block.live_granules = live_counts.get(block, 0)
                live += block.live_granules
                self.lists.push(block, BlockState.UNSWEPT)
                unswept += 1
            else:
                m = block.meta_base
                slab.buf[m:m + GRANULES_PER_BLOCK] = _ZEROS[:GRANULES_PER_BLOCK]
                block.live_granules = 0
                block.payload_dirty = True
                self.lists.push(block, BlockState.EMPTY)
                empty += 1
        self.refill_reserve()
        return ReclamationSummary(empty=empty, unswept=unswept,
                                  fragmentation_granules=frag, live_granules=live)

    # -- inspection -----------------------------------------------------------

    def occupied_granules(self):
        """Granules covered by young or currently marked objects."""
        total = 0
        for block in self.all_blocks():
            if block.state in (BlockState.EMPTY, BlockState.EVACUATION_RESERVE,
                               BlockState.UNAVAILABLE):
                continue
            total += sum(end - start for start, end in object_extents(block.meta, self.epoch))
        return total


def object_extents(meta, epoch, include_young=True):
    """(start, end) granule spans of the objects a sweep would keep.

    With include_young, objects allocated since the last trace count too.
    """
    i = 0
    n = len(meta)
    while i < n:
        b = meta[i]
        state = b & 7
        if state == epoch or (include_young and state == metabyte.YOUNG):
            j = i
            while j < n and not meta[j] & metabyte.END:
                j += 1
            yield i, j + 1
            i = j + 1
        else:
            i += 1
