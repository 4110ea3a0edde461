"""Non-moving mark-sweep space for objects above the small-object limit."""

import threading

from .errors import ContractViolation, HeapCorruption
from .geometry import LARGE_OBJECT_THRESHOLD, LOS_BASE

PAGE_BYTES = 4096


def page_round(nbytes):
    return (nbytes + PAGE_BYTES - 1) & -PAGE_BYTES


class LargeObject:
    __slots__ = ("address", "size", "rounded", "buf", "words", "mark")

    def __init__(self, address, size):
        self.address = address
        self.size = size
        self.rounded = page_round(size)
        self.buf = bytearray(self.rounded)
        self.words = memoryview(self.buf).cast("Q")
        self.mark = 0


class LargeObjectSpace:
    """One dedicated region per object.

    Regions get fresh page-aligned addresses with a guard page between
    them; addresses are never reused.
    """

    def __init__(self, threshold=LARGE_OBJECT_THRESHOLD):
        self.threshold = threshold
        self.objects = {}
        self.bytes = 0
        self._next = LOS_BASE
        self._lock = threading.Lock()
        self._mark_lock = threading.Lock()

    def contains(self, address):
        return address >= LOS_BASE and address in self.objects

    def allocate_large(self, size):
        if size <= self.threshold:
            raise ContractViolation(f"{size} bytes belongs in the small-object space")
        with self._lock:
            address = self._next
            obj = LargeObject(address, size)
            self._next += obj.rounded + PAGE_BYTES
            self.objects[address] = obj
            self.bytes += obj.rounded
        return address

    def mark_large(self, address, epoch):
        try:
            obj = self.objects[address]
        except KeyError:
            raise HeapCorruption(f"{address:#x} is not a large object") from None
        with self._mark_lock:
            if obj.mark == epoch:
                return False
            obj.mark = epoch
            return True

    def sweep_los(self, epoch):
        """Release every object not marked in epoch; return bytes freed."""
        freed = 0
        with self._lock:
            dead = [a for a, o in self.objects.items() if o.mark != epoch]
            for address in dead:
                obj = self.objects.pop(address)
                freed += obj.rounded
            self.bytes -= freed
        return freed
