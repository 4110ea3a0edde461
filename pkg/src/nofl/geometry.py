"""Fixed heap geometry of the Nofl space and address arithmetic.

A slab is a 2 MiB aligned reservation laid out as::

    [0, 8192)            slab header (one block-mark byte per block)
    [8192, 131072)       metadata, 4096 bytes per block, one byte per granule
    [131072, 2097152)    30 blocks of 64 KiB payload
"""

from dataclasses import dataclass

from .errors import ContractViolation

GRANULE_BYTES = 16
GRANULE_SHIFT = 4
BLOCK_BYTES = 65536
BLOCK_SHIFT = 16
SLAB_BYTES = 2 * 1024 * 1024
SLAB_SHIFT = 21
GRANULES_PER_BLOCK = BLOCK_BYTES // GRANULE_BYTES
META_BYTES_PER_BLOCK = GRANULES_PER_BLOCK
BLOCKS_PER_SLAB = 30
SLAB_HEADER_BYTES = 8192
META_OFFSET = SLAB_HEADER_BYTES
PAYLOAD_OFFSET = META_OFFSET + BLOCKS_PER_SLAB * META_BYTES_PER_BLOCK
LARGE_OBJECT_THRESHOLD = 8192
IMMIX_LINE_BYTES = 128

# Heap-budget cost of one block: payload plus its metadata.
BLOCK_FOOTPRINT = BLOCK_BYTES + META_BYTES_PER_BLOCK

# Virtual address ranges handed out by the spaces.  Never overlapping.
NOFL_BASE = 1 << 36
LOS_BASE = 1 << 40
SEMI_BASE = 1 << 42


@dataclass(frozen=True)
class HeapConstants:
    granule_bytes: int = GRANULE_BYTES
    block_bytes: int = BLOCK_BYTES
    slab_bytes: int = SLAB_BYTES
    meta_bytes_per_block: int = META_BYTES_PER_BLOCK
    blocks_per_slab: int = BLOCKS_PER_SLAB
    slab_header_bytes: int = SLAB_HEADER_BYTES
    large_object_threshold_bytes: int = LARGE_OBJECT_THRESHOLD
    immix_line_bytes: int = IMMIX_LINE_BYTES

    @property
    def payload_offset(self):
        return self.slab_header_bytes + self.blocks_per_slab * self.meta_bytes_per_block

    def check(self):
        assert self.block_bytes // self.granule_bytes == self.meta_bytes_per_block
        assert (self.blocks_per_slab * (self.block_bytes + self.meta_bytes_per_block)
                + self.slab_header_bytes == self.slab_bytes)
        assert self.meta_bytes_per_block * 16 == self.block_bytes


CONSTANTS = HeapConstants()


def slab_of(address):
    return address & ~(SLAB_BYTES - 1)


def _payload_offset(address):
    offset = address - slab_of(address)
    if offset < PAYLOAD_OFFSET:
        raise ContractViolation(f"address {address:#x} is not in a slab payload region")
    return offset - PAYLOAD_OFFSET


def granule_index(address):
    """Slab-relative granule index of a granule-aligned payload address."""
    if address & (GRANULE_BYTES - 1):
        raise ContractViolation(f"address {address:#x} is not 16-byte aligned")
    return _payload_offset(address) >> GRANULE_SHIFT


def metadata_location(address):
    return slab_of(address) + META_OFFSET + granule_index(address)


def object_location(meta_address):
    """Inverse of metadata_location."""
    slab = slab_of(meta_address)
    index = meta_address - slab - META_OFFSET
    if not 0 <= index < BLOCKS_PER_SLAB * GRANULES_PER_BLOCK:
        raise ContractViolation(f"{meta_address:#x} is not a metadata byte")
    return slab + PAYLOAD_OFFSET + (index << GRANULE_SHIFT)


def block_index(address):
    return _payload_offset(address) >> BLOCK_SHIFT


def block_payload_range(slab, index):
    if not 0 <= index < BLOCKS_PER_SLAB:
        raise ContractViolation(f"block index {index} out of range")
    start = slab + PAYLOAD_OFFSET + index * BLOCK_BYTES
    return start, start + BLOCK_BYTES


def block_metadata_range(slab, index):
    if not 0 <= index < BLOCKS_PER_SLAB:
        raise ContractViolation(f"block index {index} out of range")
    start = slab + META_OFFSET + index * META_BYTES_PER_BLOCK
    return start, start + META_BYTES_PER_BLOCK


def metadata_overhead():
    """Metadata bytes per payload byte for a whole slab (exactly 1/16)."""
    from fractions import Fraction
    meta = BLOCKS_PER_SLAB * META_BYTES_PER_BLOCK
    payload = BLOCKS_PER_SLAB * BLOCK_BYTES
    return Fraction(meta, payload)
