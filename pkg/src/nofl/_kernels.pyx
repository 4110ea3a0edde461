# Compiled metadata kernels.  Each function runs start to finish while
# holding the GIL, which is what makes try_mark atomic among threads.

from libc.stdint cimport uint64_t
from libc.string cimport memcpy
from cpython.bytearray cimport PyByteArray_AS_STRING, PyByteArray_GET_SIZE

BACKEND = "cython"

cdef extern from * nogil:
    int __builtin_ctzll(unsigned long long)

cdef uint64_t LOW3 = 0x0707070707070707ULL
cdef uint64_t ONES = 0x0101010101010101ULL
cdef uint64_t K7F = 0x7F7F7F7F7F7F7F7FULL
cdef uint64_t K80 = 0x8080808080808080ULL
cdef uint64_t END = 0x2020202020202020ULL


cdef inline unsigned char* _bytes(bytearray buf, Py_ssize_t base, Py_ssize_t length) except NULL:
    if base < 0 or length < 0 or base + length > PyByteArray_GET_SIZE(buf):
        raise IndexError("metadata range outside buffer")
    return <unsigned char*>PyByteArray_AS_STRING(buf) + base


cdef inline Py_ssize_t _scan_state(unsigned char* p, Py_ssize_t length,
                                   Py_ssize_t i, int epoch) nogil:
    cdef uint64_t w, y, zero
    cdef uint64_t pattern = ONES * <uint64_t>epoch
    while i + 8 <= length:
        memcpy(&w, p + i, 8)
        y = (w & LOW3) ^ pattern
        zero = ~(y + K7F) & K80
        if zero:
            return i + (__builtin_ctzll(zero) >> 3)
        i += 8
    while i < length:
        if (p[i] & 7) == epoch:
            return i
        i += 1
    return length


cdef inline Py_ssize_t _scan_end(unsigned char* p, Py_ssize_t length,
                                 Py_ssize_t i) nogil:
    cdef uint64_t w, hits
    while i + 8 <= length:
        memcpy(&w, p + i, 8)
        hits = w & END
        if hits:
            return i + (__builtin_ctzll(hits) >> 3)
        i += 8
    while i < length:
        if p[i] & 32:
            return i
        i += 1
    return length


def scan_state(bytearray buf, Py_ssize_t base, Py_ssize_t length,
               Py_ssize_t start, int epoch):
    cdef unsigned char* p = _bytes(buf, base, length)
    if start >= length:
        return length
    return _scan_state(p, length, start, epoch)


def scan_end(bytearray buf, Py_ssize_t base, Py_ssize_t length, Py_ssize_t start):
    cdef unsigned char* p = _bytes(buf, base, length)
    if start >= length:
        return length
    return _scan_end(p, length, start)


def next_hole(bytearray buf, Py_ssize_t base, Py_ssize_t length,
              Py_ssize_t s, int epoch):
    cdef unsigned char* p = _bytes(buf, base, length)
    while s < length and (p[s] & 7) == epoch:
        s = _scan_end(p, length, s) + 1
    if s >= length:
        return length, length
    return s, _scan_state(p, length, s, epoch)


def try_mark(bytearray buf, Py_ssize_t index, int epoch):
    cdef unsigned char* p = _bytes(buf, index, 1)
    cdef unsigned char b = p[0]
    cdef int state = b & 7
    if state == epoch:
        return 0
    if state == 0:
        return -1
    p[0] = (b & 0xF8) | epoch
    return 1
