"""Benchmark kernels written against the mutator API.

Every kernel keeps the references it needs across an allocation in its
mutator's shadow stack and re-reads them afterwards, because either
collector may move objects at any allocation.
"""

import hashlib
import struct
from dataclasses import dataclass, field

from ..embedder import (BYTES, PAIR, VECTOR, census, fixnum, is_heap_ref,
                        kind_of, length_of)
from ..geometry import GRANULE_SHIFT, GRANULES_PER_BLOCK, IMMIX_LINE_BYTES
from ..nofl_space import BlockState, object_extents
from .prng import SplitMix64


@dataclass
class WorkloadResult:
    checkpoints: list = field(default_factory=list)
    checksum: str = ""
    extra: dict = field(default_factory=dict)

    def seal(self):
        h = hashlib.blake2b(digest_size=16)
        for label, digest in self.checkpoints:
            h.update(f"{label}:{digest};".encode())
        self.checksum = h.hexdigest()
        return self


# -- gcbench -------------------------------------------------------------------

@dataclass
class GcbenchParams:
    min_depth: int = 4
    max_depth: int = 16
    stretch_depth: int = None
    long_lived_depth: int = None
    array_size: int = None
    fragmentation: int = 0

    def __post_init__(self):
        if self.stretch_depth is None:
            self.stretch_depth = self.max_depth + 2
        if self.long_lived_depth is None:
            self.long_lived_depth = self.max_depth
        if self.array_size is None:
            # 500000 doubles at the classic depth of 16, scaled with tree size.
            self.array_size = max(1, 500000 >> max(0, 16 - self.max_depth))


def tree_size(depth):
    return (1 << (depth + 1)) - 1


def num_iters(params, depth):
    return 2 * tree_size(params.stretch_depth) // tree_size(depth)


class _Gcbench:
    """Trees of three-slot vectors: left, right, and a fixnum payload."""

    def __init__(self, m, params):
        self.m = m
        self.filler = params.fragmentation
        self.locate = m._locate

    def node(self):
        m = self.m
        n = m.allocate(VECTOR, 3)
        if self.filler:
            m.push(n)
            m.allocate(BYTES, self.filler)
            n = m.stack.pop()
        return n

    def populate(self, depth, slot):
        """Top-down: grow the tree below the node in stack slot."""
        if depth <= 0:
            return
        depth -= 1
        m = self.m
        stack = m.stack
        locate = self.locate
        left = self.node()
        words, wi = locate(stack[slot])
        words[wi + 1] = left
        words[wi + 3] = fixnum(depth)
        right = self.node()
        words, wi = locate(stack[slot])
        words[wi + 2] = right
        sp = len(stack)
        stack.append(words[wi + 1])
        self.populate(depth, sp)
        words, wi = locate(stack[slot])
        stack[sp] = words[wi + 2]
        self.populate(depth, sp)
        del stack[sp:]

    def make_tree(self, depth):
        """Bottom-up construction."""
        m = self.m
        stack = m.stack
        if depth <= 0:
            n = self.node()
            words, wi = self.locate(n)
            words[wi + 3] = fixnum(0)
            return n
        sp = len(stack)
        stack.append(self.make_tree(depth - 1))
        stack.append(self.make_tree(depth - 1))
        n = self.node()
        words, wi = self.locate(n)
        words[wi + 1] = stack[sp]
        words[wi + 2] = stack[sp + 1]
        words[wi + 3] = fixnum(depth)
        del stack[sp:]
        return n


def run_gcbench(m, params=None, seed=0, checkpoints=True):
    """The classic schedule: a stretch tree, a long-lived tree and array,
    then top-down and bottom-up trees at each depth from min to max."""
    params = params or GcbenchParams()
    g = _Gcbench(m, params)
    heap = m.heap
    result = WorkloadResult()
    base = m.sp

    m.safepoint()
    g.make_tree(params.stretch_depth)

    m.push(g.node())
    long_lived = base
    g.populate(params.long_lived_depth, long_lived)

    array = m.allocate(BYTES, 8 * params.array_size)
    view = m.bytes_view(array)
    half = params.array_size // 2
    for i in range(half):
        struct.pack_into("<d", view, 8 * i, 1.0 / (i + 1))
    del view
    m.push(array)

    for depth in range(params.min_depth, params.max_depth + 1, 2):
        iters = num_iters(params, depth)
        sp = m.sp
        for _ in range(iters):
            m.safepoint()
            m.check_deadline()
            m.push(g.node())
            g.populate(depth, sp)
            m.truncate(sp)
        last = 0
        for _ in range(iters):
            m.safepoint()
            m.check_deadline()
            last = g.make_tree(depth)
        if checkpoints:
            c = census(heap, [last])
            result.checkpoints.append((f"depth{depth}", c.checksum))
            result.extra[f"nodes{depth}"] = c.objects

    m.safepoint()
    if half:
        probe = min(1000, half - 1)
        view = m.bytes_view(m.stack[base + 1])
        if struct.unpack_from("<d", view, 8 * probe)[0] != 1.0 / (probe + 1):
            raise AssertionError("long-lived array lost its contents")
        del view
    final = census(heap, m.stack[base:base + 2])
    result.checkpoints.append(("final", final.checksum))
    result.extra["live_objects"] = final.objects
    m.truncate(base)
    return result.seal()


# -- splay ----------------------------------------------------------------------

@dataclass
class SplayParams:
    tree_size: int = 8000
    operations: int = 80
    payload_depth: int = 5
    checkpoints: int = 10


KEY, VALUE, LEFT, RIGHT = 1, 2, 3, 4


class SplayTree:
    """Top-down splay tree of four-slot vector nodes: key, value, left, right.

    The root lives in a shadow-stack slot.  Splaying itself does not
    allocate past its first step, so it holds raw addresses in locals.
    """

    def __init__(self, m):
        self.m = m
        self.locate = m._locate
        self.slot = m.push(0)
        self.size = 0

    @property
    def root(self):
        return self.m.stack[self.slot]

    def _get(self, node, index):
        words, wi = self.locate(node)
        return words[wi + index]

    def _set(self, node, index, value):
        words, wi = self.locate(node)
        words[wi + index] = value

    def new_node(self, key, value):
        m = self.m
        m.push(value)
        n = m.allocate(VECTOR, 4)
        words, wi = self.locate(n)
        words[wi + KEY] = key
        words[wi + VALUE] = m.stack.pop()
        return n

    def splay(self, key):
        get, put = self._get, self._set
        dummy = self.new_node(0, 0)
        left = right = dummy
        current = self.root
        while True:
            ck = get(current, KEY)
            if key < ck:
                cl = get(current, LEFT)
                if not cl:
                    break
                if key < get(cl, KEY):
                    put(current, LEFT, get(cl, RIGHT))
                    put(cl, RIGHT, current)
                    current = cl
                    if not get(current, LEFT):
                        break
                put(right, LEFT, current)
                right = current
                current = get(current, LEFT)
            elif key > ck:
                cr = get(current, RIGHT)
                if not cr:
                    break
                if key > get(cr, KEY):
                    put(current, RIGHT, get(cr, LEFT))
                    put(cr, LEFT, current)
                    current = cr
                    if not get(current, RIGHT):
                        break
                put(left, RIGHT, current)
                left = current
                current = get(current, RIGHT)
            else:
                break
        put(left, RIGHT, get(current, LEFT))
        put(right, LEFT, get(current, RIGHT))
        put(current, LEFT, get(dummy, RIGHT))
        put(current, RIGHT, get(dummy, LEFT))
        self.m.stack[self.slot] = current

    def insert(self, key, value_slot):
        """Insert key with the value held in value_slot; False if present."""
        m = self.m
        if not self.root:
            self.m.stack[self.slot] = self.new_node(key, m.stack[value_slot])
            self.size += 1
            return True
        self.splay(key)
        root = self.root
        if self._get(root, KEY) == key:
            return False
        node = self.new_node(key, m.stack[value_slot])
        root = self.root
        if key > self._get(root, KEY):
            self._set(node, LEFT, root)
            self._set(node, RIGHT, self._get(root, RIGHT))
            self._set(root, RIGHT, 0)
        else:
            self._set(node, RIGHT, root)
            self._set(node, LEFT, self._get(root, LEFT))
            self._set(root, LEFT, 0)
        self.m.stack[self.slot] = node
        self.size += 1
        return True

    def find(self, key):
        if not self.root:
            return 0
        self.splay(key)
        root = self.root
        return root if self._get(root, KEY) == key else 0

    def remove(self, key):
        if not self.root:
            raise KeyError(key)
        self.splay(key)
        root = self.root
        if self._get(root, KEY) != key:
            raise KeyError(key)
        left = self._get(root, LEFT)
        if not left:
            self.m.stack[self.slot] = self._get(root, RIGHT)
        else:
            right = self._get(root, RIGHT)
            self.m.stack[self.slot] = left
            self.m.push(right)
            self.splay(key)
            right = self.m.stack.pop()
            self._set(self.root, RIGHT, right)
        self.size -= 1

    def find_max(self, start):
        current = start
        while True:
            r = self._get(current, RIGHT)
            if not r:
                return current
            current = r

    def find_greatest_less_than(self, key):
        if not self.root:
            return 0
        self.splay(key)
        root = self.root
        if self._get(root, KEY) < key:
            return root
        left = self._get(root, LEFT)
        return self.find_max(left) if left else 0


def _payload(m, depth, tag):
    stack = m.stack
    locate = m._locate
    if depth == 0:
        sp = len(stack)
        arr = m.allocate(VECTOR, 10)
        words, wi = locate(arr)
        for i in range(10):
            words[wi + 1 + i] = fixnum(i)
        stack.append(arr)
        text = b"String for key " + tag + b" in leaf node"
        s = m.allocate(BYTES, len(text))
        m.bytes_view(s)[:] = text
        stack.append(s)
        leaf = m.allocate(VECTOR, 2)
        words, wi = locate(leaf)
        words[wi + 1] = stack[sp]
        words[wi + 2] = stack[sp + 1]
        del stack[sp:]
        return leaf
    sp = len(stack)
    stack.append(_payload(m, depth - 1, tag))
    stack.append(_payload(m, depth - 1, tag))
    p = m.allocate(PAIR)
    words, wi = locate(p)
    words[wi] = stack[sp]
    words[wi + 1] = stack[sp + 1]
    del stack[sp:]
    return p


def run_splay(m, params=None, seed=0, checkpoints=True):
    params = params or SplayParams()
    rng = SplitMix64(seed)
    heap = m.heap
    base = m.sp
    tree = SplayTree(m)
    result = WorkloadResult()

    def insert_new_node():
        while True:
            key = fixnum(rng.next_u64() >> 2)
            if not tree.find(key):
                break
        m.push(_payload(m, params.payload_depth, str(key >> 1).encode()))
        tree.insert(key, m.sp - 1)
        m.pop()
        return key

    for _ in range(params.tree_size):
        m.safepoint()
        m.check_deadline()
        insert_new_node()

    every = max(1, params.operations // max(1, params.checkpoints))
    for op in range(params.operations):
        m.safepoint()
        m.check_deadline()
        key = insert_new_node()
        greatest = tree.find_greatest_less_than(key)
        tree.remove(tree._get(greatest, KEY) if greatest else key)
        if not params.tree_size - 1 <= tree.size <= params.tree_size + 1:
            raise AssertionError(f"splay tree drifted to {tree.size} nodes")
        if checkpoints and (op + 1) % every == 0:
            c = census(heap, [tree.root])
            result.checkpoints.append((f"op{op + 1}", c.checksum))

    final = census(heap, [tree.root])
    result.checkpoints.append(("final", final.checksum))
    result.extra["nodes"] = tree.size
    result.extra["live_objects"] = final.objects
    m.truncate(base)
    return result.seal()


# -- fragger ---------------------------------------------------------------------

@dataclass
class FraggerParams:
    blocks: int = 16
    stride: int = 256
    small_bytes: int = 16
    medium_bytes: int = 272
    fill: bool = True


def line_model(meta, epoch, line_granules=IMMIX_LINE_BYTES >> GRANULE_SHIFT):
    """Reclaimable granules of one block's mark table under line marking.

    A line holding any part of a live object is kept, and so is the line
    after one holding a small object's start, since a line-marking
    collector cannot tell where small objects end.
    """
    lines = GRANULES_PER_BLOCK // line_granules
    live = bytearray(lines)
    for start, end in object_extents(meta, epoch, include_young=False):
        for line in range(start // line_granules, (end - 1) // line_granules + 1):
            live[line] = 1
        if end - start < line_granules and start // line_granules + 1 < lines:
            live[start // line_granules + 1] = 1
    return (lines - sum(live)) * line_granules


def granule_model(meta, epoch):
    """Reclaimable granules under precise per-granule marks."""
    used = sum(end - start for start, end in object_extents(meta, epoch, include_young=False))
    return GRANULES_PER_BLOCK - used


def run_fragger(m, params=None, seed=0, checkpoints=True):
    """Dense small objects, one survivor per stride granules, a collection,
    then medium objects poured into the holes.

    Only meaningful under the mostly-marking collector, whose block
    statistics it reports.
    """
    params = params or FraggerParams()
    heap = m.heap
    space = heap.space
    base = m.sp
    result = WorkloadResult()
    small_granules = (params.small_bytes + 15) >> GRANULE_SHIFT
    count = params.blocks * GRANULES_PER_BLOCK // small_granules
    every = max(1, params.stride // small_granules)
    survivors = -(-count // every)

    holder = m.allocate(VECTOR, survivors)
    m.push(holder)
    locate = m._locate
    kept = 0
    for i in range(count):
        if i % 4096 == 0:
            m.safepoint()
            m.check_deadline()
        obj = m.allocate(BYTES, params.small_bytes - 8)
        if i % every == 0:
            words, wi = locate(m.stack[base])
            words[wi + 1 + kept] = obj
            kept += 1
    m.collect("fragger")
    epoch = space.epoch
    touched = [b for b in space.all_blocks() if b.state is BlockState.UNSWEPT]
    granule_free = line_free = 0
    for block in touched:
        meta = block.meta
        granule_free += granule_model(meta, epoch)
        line_free += line_model(meta, epoch)
    total = len(touched) * GRANULES_PER_BLOCK
    result.extra.update(blocks=len(touched), survivors=kept,
                        granule_reclaimable=granule_free / total if total else 0.0,
                        line_reclaimable=line_free / total if total else 0.0)

    if params.fill:
        medium_granules = (params.medium_bytes + 15) >> GRANULE_SHIFT
        holes = granule_free // medium_granules
        for i in range(holes):
            if i % 1024 == 0:
                m.safepoint()
                m.check_deadline()
            m.allocate(BYTES, params.medium_bytes - 8)
        used = 0
        for block in touched:
            used += sum(e - s for s, e in object_extents(block.meta, space.epoch))
        result.extra["occupancy"] = used / total if total else 0.0
    if checkpoints:
        result.checkpoints.append(("survivors", census(heap, [m.stack[base]]).checksum))
    m.truncate(base)
    return result.seal()


# -- random graphs ---------------------------------------------------------------

def build_random_graph(m, rng, objects=200, roots=4, edge_density=2):
    """Allocate a random graph of mixed kinds; returns the root slot range.

    Vectors, closures and boxes get references to earlier objects, so any
    shape of sharing and garbage appears.  Everything except the roots is
    reachable only through the heap.
    """
    stack = m.stack
    start = len(stack)
    locate = m._locate
    table = m.allocate(VECTOR, objects)
    stack.append(table)
    for i in range(objects):
        choice = rng.below(5)
        if choice == 0:
            obj = m.allocate(PAIR)
            nrefs = 2
            first = 0
        elif choice == 1:
            n = rng.below(2 * edge_density + 1)
            obj = m.allocate(VECTOR, n)
            nrefs, first = n, 1
        elif choice == 2:
            obj = m.allocate(BYTES, rng.below(40))
            nrefs = 0
            view = m.bytes_view(obj)
            view[:] = bytes(rng.below(256) for _ in range(len(view)))
            first = 1
        elif choice == 3:
            n = rng.below(edge_density + 1)
            obj = m.allocate(3, n)
            words, wi = locate(obj)
            words[wi + 1] = fixnum(i)
            nrefs, first = n, 2
        else:
            obj = m.allocate(4)
            nrefs, first = 1, 1
        words, wi = locate(obj)
        for k in range(nrefs):
            if i and rng.below(4):
                words[wi + first + k] = m.load(stack[start], 1 + rng.below(i))
            else:
                words[wi + first + k] = fixnum(rng.below(1000))
        m.store(stack[start], 1 + i, obj)
    for _ in range(roots):
        stack.append(m.load(stack[start], 1 + rng.below(objects)))
    # Drop the table so only the chosen roots keep things alive.
    stack[start] = 0
    return start, len(stack)


def reachable(heap, roots):
    """Addresses reachable from roots, by a plain walk."""
    seen = set()
    todo = [v for v in roots if is_heap_ref(v)]
    while todo:
        v = todo.pop()
        if v in seen:
            continue
        seen.add(v)
        words, wi = heap.locate(v)
        w0 = words[wi]
        kind = kind_of(w0)
        n = length_of(w0)
        span = {PAIR: (0, 2), VECTOR: (1, n), 3: (2, n), 4: (1, 1)}.get(kind, (0, 0))
        for k in range(span[0], span[0] + span[1]):
            if is_heap_ref(words[wi + k]):
                todo.append(words[wi + k])
    return seen


WORKLOADS = {
    "gcbench": (run_gcbench, GcbenchParams),
    "splay": (run_splay, SplayParams),
    "fragger": (run_fragger, FraggerParams),
}

# Parameters small enough for an interpreted heap.  The classic
# parameters are the dataclass defaults.
DESK_PARAMS = {
    "gcbench": {"max_depth": 12},
    "splay": {"tree_size": 1000, "operations": 10000, "payload_depth": 2},
    "fragger": {},
}
