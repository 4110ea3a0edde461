"""Pure-Python metadata kernels.

Scans load eight 8-byte words per step as one integer and apply the
byte-parallel tests to every lane at once; the tests never carry across
byte boundaries, so a 64-byte chunk behaves exactly like eight words.
"""

import threading

BACKEND = "python"

_CHUNK = 64
_LOW3 = int.from_bytes(b"\x07" * _CHUNK, "little")
_ONES = int.from_bytes(b"\x01" * _CHUNK, "little")
_K7F = int.from_bytes(b"\x7f" * _CHUNK, "little")
_K80 = int.from_bytes(b"\x80" * _CHUNK, "little")
_END = int.from_bytes(b"\x20" * _CHUNK, "little")

_from_bytes = int.from_bytes
_mark_lock = threading.Lock()


def _first_byte(mask):
    return ((mask & -mask).bit_length() - 1) >> 3


def scan_state(buf, base, length, start, epoch):
    """First i >= start with buf[base+i] & 7 == epoch, else length."""
    i = start
    pattern = _ONES * epoch
    view = memoryview(buf)
    while i + _CHUNK <= length:
        p = base + i
        y = (_from_bytes(view[p:p + _CHUNK], "little") & _LOW3) ^ pattern
        zero = ((y + _K7F) & _K80) ^ _K80
        if zero:
            return i + _first_byte(zero)
        i += _CHUNK
    while i < length:
        if buf[base + i] & 7 == epoch:
            return i
        i += 1
    return length


def scan_end(buf, base, length, start):
    """First i >= start with the end bit set, else length."""
    i = start
    view = memoryview(buf)
    while i + _CHUNK <= length:
        p = base + i
        hits = _from_bytes(view[p:p + _CHUNK], "little") & _END
        if hits:
            return i + _first_byte(hits)
        i += _CHUNK
    while i < length:
        if buf[base + i] & 32:
            return i
        i += 1
    return length


def next_hole(buf, base, length, s, epoch):
    """Skip live objects from s; return the next hole as (start, end).

    Returns (length, length) when the range holds no further hole.
    """
    while s < length and buf[base + s] & 7 == epoch:
        s = scan_end(buf, base, length, s) + 1
    if s >= length:
        return length, length
    return s, scan_state(buf, base, length, s, epoch)


def try_mark(buf, index, epoch):
    """Atomically set the mark on an object-start byte.

    Returns 1 if this call marked it, 0 if it was already marked and -1 if
    the byte is not an object start.
    """
    with _mark_lock:
        b = buf[index]
        state = b & 7
        if state == epoch:
            return 0
        if state == 0:
            return -1
        buf[index] = (b & 0xF8) | epoch
        return 1
