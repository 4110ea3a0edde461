"""Per-granule metadata byte codec and scans.

Bit layout::

    bits 0-2  state: 0 hole, 1 young, 2/3/4 mark epochs
    bit 5     end of object (32)
    bit 6     pinned (64)
    bits 3, 4, 7 reserved
"""

from .errors import ContractViolation
from .kernels import scan_end, scan_state

STATE_MASK = 0x07
HOLE = 0
YOUNG = 1
END = 0x20
PINNED = 0x40
# Reserved bits.  Never written by this library.
RESERVED_LOGGED = 0x08
RESERVED_UNTAGGED = 0x10
RESERVED_GENERATION = 0x80

EPOCHS = (2, 3, 4)
_NEXT_EPOCH = {2: 3, 3: 4, 4: 2}


def rotate(epoch):
    try:
        return _NEXT_EPOCH[epoch]
    except KeyError:
        raise ContractViolation(f"invalid mark epoch {epoch}") from None


def state(byte):
    return byte & STATE_MASK


def is_object_start(byte):
    return 1 <= byte & STATE_MASK <= 4


def write_allocation(meta, start, n_granules):
    """Record an n-granule object starting at meta[start]."""
    if n_granules < 1:
        raise ContractViolation("objects occupy at least one granule")
    if any(meta[start:start + n_granules]):
        raise ContractViolation("allocation overlaps live metadata")
    if n_granules == 1:
        meta[start] = YOUNG | END
    else:
        meta[start] = YOUNG
        meta[start + n_granules - 1] = END


def set_mark(byte, epoch):
    if epoch not in _NEXT_EPOCH:
        raise ContractViolation(f"invalid mark epoch {epoch}")
    if not is_object_start(byte):
        raise ContractViolation(f"byte {byte:#x} is not an object start")
    return (byte & ~STATE_MASK & 0xFF) | epoch


def is_marked(byte, epoch):
    return byte & STATE_MASK == epoch


def _range(meta, base, length):
    if length is None:
        length = len(meta) - base
    if not isinstance(meta, bytearray):
        meta = bytearray(meta)
    return meta, length


def scan_for_state(meta, start, epoch, base=0, length=None):
    """Index (relative to base) of the first byte at or after start whose
    state is epoch, or the range length if there is none."""
    meta, length = _range(meta, base, length)
    if not 0 <= start <= length:
        raise ContractViolation("scan start outside range")
    return scan_state(meta, base, length, start, epoch)


def scan_for_end(meta, start, base=0, length=None):
    meta, length = _range(meta, base, length)
    if not 0 <= start <= length:
        raise ContractViolation("scan start outside range")
    return scan_end(meta, base, length, start)
