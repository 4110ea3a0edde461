"""Tagged values, object descriptors, mutator handles and the census walk.

Word tags (low three bits)::

    ..1   fixnum
    010   character
    100   constant (#f, #t, unspecified)
    000   heap reference (0 itself is the empty list)
    110   object header; never a valid value, so a first word with another
          tag means the object is a pair and that word is its car

Headers pack ``length << 8 | kind << 3 | 0b110``.  Kinds 30 and 31 are
reserved for the evacuation protocol: 30 marks a first word claimed by a
copying tracer, 31 carries a forwarding address in bits 8 and up.
"""

import hashlib
import struct
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import BenchTimeout, ContractViolation, HeapCorruption

MASK64 = (1 << 64) - 1
WORD = 8

NULL = 0
FALSE = 0x04
TRUE = 0x0C
UNSPECIFIED = 0x14

HEADER_TAG = 0b110
PAIR = 0
VECTOR = 1
BYTES = 2
CLOSURE = 3
BOX = 4
KIND_NAMES = {PAIR: "pair", VECTOR: "vector", BYTES: "bytes", CLOSURE: "closure", BOX: "box"}

BUSY = (30 << 3) | HEADER_TAG
FORWARD_TAG = (31 << 3) | HEADER_TAG

_FIXNUM_MIN = -(1 << 62)
_FIXNUM_MAX = (1 << 62) - 1


# -- immediates --------------------------------------------------------------

def fixnum(n):
    if not _FIXNUM_MIN <= n <= _FIXNUM_MAX:
        raise ContractViolation(f"{n} does not fit in a fixnum")
    return ((n << 1) | 1) & MASK64


def fixnum_value(w):
    v = w >> 1
    return v - (1 << 63) if v >= 1 << 62 else v


def is_fixnum(w):
    return w & 1 == 1


def char(c):
    return (ord(c) << 3) | 0b010


def char_value(w):
    return chr(w >> 3)


def is_char(w):
    return w & 7 == 0b010


def boolean(b):
    return TRUE if b else FALSE


def is_heap_ref(w):
    return w != 0 and w & 7 == 0


def is_immediate(w):
    return not is_heap_ref(w)


# -- descriptors --------------------------------------------------------------

def header(kind, length=0):
    if kind not in KIND_NAMES or kind == PAIR:
        raise ContractViolation(f"kind {kind} has no header")
    return (length << 8) | (kind << 3) | HEADER_TAG


def kind_of(w0):
    if w0 & 7 != HEADER_TAG:
        return PAIR
    kind = (w0 >> 3) & 31
    if kind not in KIND_NAMES:
        raise HeapCorruption(f"unknown object kind in first word {w0:#x}")
    return kind


def length_of(w0):
    return 0 if w0 & 7 != HEADER_TAG else w0 >> 8


def logical_size(kind, length=0):
    """Bytes an object needs before alignment."""
    if kind == PAIR or kind == BOX:
        return 16
    if kind == VECTOR:
        return WORD + WORD * length
    if kind == BYTES:
        return WORD + length
    if kind == CLOSURE:
        return 2 * WORD + WORD * length
    raise HeapCorruption(f"unknown object kind {kind}")


def aligned(nbytes, alignment):
    return max(alignment, (nbytes + alignment - 1) & -alignment)


def size_from_header(w0, alignment=16):
    """Allocated size of the object whose first word is w0."""
    if w0 & 7 != HEADER_TAG:
        return aligned(16, alignment)
    return aligned(logical_size(kind_of(w0), w0 >> 8), alignment)


# (first word index, count) of the reference-holding words per kind.
def field_span(w0):
    if w0 & 7 != HEADER_TAG:
        return 0, 2
    kind = (w0 >> 3) & 31
    if kind == VECTOR:
        return 1, w0 >> 8
    if kind == BOX:
        return 1, 1
    if kind == CLOSURE:
        return 2, w0 >> 8
    if kind == BYTES:
        return 1, 0
    raise HeapCorruption(f"unknown object kind in first word {w0:#x}")


def is_forwarded(w0):
    return w0 & 0xFF == FORWARD_TAG


def forwarding_word(address):
    return (address << 8) | FORWARD_TAG


def forwarded_address(w0):
    return w0 >> 8


def object_size(heap, obj):
    words, wi = heap.locate(obj)
    return size_from_header(words[wi], heap.alignment)


def trace_fields(heap, obj, visitor):
    """Call visitor(slot_address) for each slot of obj holding a reference."""
    words, wi = heap.locate(obj)
    start, count = field_span(words[wi])
    for k in range(start, start + count):
        if is_heap_ref(words[wi + k]):
            visitor(obj + WORD * k)


# -- mutators ------------------------------------------------------------------

class Mutator:
    """A mutator thread's handle: shadow stack, allocator state, safepoints.

    Every heap reference a mutator keeps across an allocation or a
    safepoint poll must live in ``stack`` (or a global root); the collector
    rewrites those slots when it moves objects.
    """

    def __init__(self, heap, ident):
        self.heap = heap
        self.id = ident
        self.stack = []
        self.core = None
        self.deadline = None
        self._alloc = heap.allocate_bytes
        self._locate = heap.locate
        self.allocated_bytes = 0

    # shadow stack
    def push(self, value):
        self.stack.append(value)
        return len(self.stack) - 1

    def pop(self, n=1):
        del self.stack[len(self.stack) - n:]

    @property
    def sp(self):
        return len(self.stack)

    def truncate(self, sp):
        del self.stack[sp:]

    # safepoints
    def safepoint(self):
        if self.heap.stop_requested:
            self.heap.park(self)

    def check_deadline(self):
        if self.deadline is not None and time.perf_counter() > self.deadline:
            raise BenchTimeout("benchmark exceeded its time limit")

    def collect(self, reason="explicit"):
        self.heap.collect(self, reason)

    # allocation
    def allocate(self, kind, length=0):
        if self.heap.stop_requested:
            self.heap.park(self)
        nbytes = logical_size(kind, length)
        addr = self._alloc(self, nbytes)
        if kind != PAIR:
            words, wi = self._locate(addr)
            words[wi] = (length << 8) | (kind << 3) | HEADER_TAG
        return addr

    def allocate_raw(self, nbytes):
        """Allocate nbytes with no header written.  Tests only."""
        if self.heap.stop_requested:
            self.heap.park(self)
        return self._alloc(self, nbytes)

    # field access
    def load(self, obj, index):
        words, wi = self._locate(obj)
        return words[wi + index]

    def store(self, obj, index, value):
        words, wi = self._locate(obj)
        words[wi + index] = value

    def car(self, pair):
        return self.load(pair, 0)

    def cdr(self, pair):
        return self.load(pair, 1)

    def vector_ref(self, vec, i):
        return self.load(vec, 1 + i)

    def vector_set(self, vec, i, value):
        self.store(vec, 1 + i, value)

    def length(self, obj):
        return length_of(self.load(obj, 0))

    def kind(self, obj):
        return kind_of(self.load(obj, 0))

    def bytes_view(self, obj):
        words, wi = self._locate(obj)
        n = words[wi] >> 8
        start = (wi + 1) * WORD
        return memoryview(words.obj)[start:start + n]

    def pin(self, obj):
        self.heap.pin(obj)

    def unpin(self, obj):
        self.heap.unpin(obj)


# -- census --------------------------------------------------------------------

@dataclass
class Census:
    objects: int = 0
    bytes: int = 0
    kinds: dict = field(default_factory=dict)
    checksum: str = ""
    addresses: list = field(default_factory=list)


_pack_ref = struct.Struct("<BQ").pack
_pack_head = struct.Struct("<BBQ").pack


def census(heap, roots, keep_addresses=False):
    """Collector-independent walk over everything reachable from roots.

    Objects are numbered in breadth-first discovery order and references
    hashed by number, so the checksum is the same whatever addresses a
    collector assigned.
    """
    locate = heap.locate
    ids = {}
    order = deque()
    h = hashlib.blake2b(digest_size=16)
    result = Census()
    kinds = {}

    def encode(v):
        if v != 0 and v & 7 == 0:
            n = ids.get(v)
            if n is None:
                n = ids[v] = len(ids)
                order.append(v)
            return _pack_ref(1, n)
        return _pack_ref(0, v)

    h.update(b"".join(encode(v) for v in roots))
    while order:
        obj = order.popleft()
        words, wi = locate(obj)
        w0 = words[wi]
        kind = kind_of(w0)
        length = length_of(w0)
        name = KIND_NAMES[kind]
        kinds[name] = kinds.get(name, 0) + 1
        result.objects += 1
        result.bytes += logical_size(kind, length)
        if keep_addresses:
            result.addresses.append(obj)
        parts = [_pack_head(2, kind, length)]
        if kind == PAIR:
            parts.append(encode(words[wi]))
            parts.append(encode(words[wi + 1]))
        elif kind == BYTES:
            start = (wi + 1) * WORD
            parts.append(bytes(memoryview(words.obj)[start:start + length]))
        else:
            nwords = (logical_size(kind, length) - WORD) // WORD
            for k in range(wi + 1, wi + 1 + nwords):
                parts.append(encode(words[k]))
        h.update(b"".join(parts))
    result.kinds = kinds
    result.checksum = h.hexdigest()
    return result
