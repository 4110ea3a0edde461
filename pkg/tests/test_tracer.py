import random
import threading

import pytest

from nofl.bench.prng import SplitMix64
from nofl.bench.workloads import build_random_graph, reachable
from nofl.embedder import BOX, BYTES, VECTOR, census, fixnum, forwarded_address, is_forwarded
from nofl.errors import HeapCorruption, HeapExhausted
from nofl.nofl_space import BlockState
from nofl.tracer import StealDeque


def tree(m, depth):
    """Complete binary tree with 2**(depth+1) - 1 nodes."""
    sp = m.sp
    m.push(tree(m, depth - 1) if depth else 0)
    m.push(tree(m, depth - 1) if depth else 0)
    v = m.allocate(VECTOR, 3)
    m.vector_set(v, 0, m.stack[sp])
    m.vector_set(v, 1, m.stack[sp + 1])
    m.vector_set(v, 2, fixnum(depth))
    m.truncate(sp)
    return v


def force_candidate(heap, pick):
    """Make the block(s) pick(space) returns candidates in the next cycle."""
    space = heap.space
    original = space.prepare_cycle

    def prepare():
        plan = original()
        blocks = pick(space)
        for block in blocks if isinstance(blocks, list) else [blocks]:
            block.evacuating = block.evac_allowed = True
            plan.candidates.append(block)
        return plan
    space.prepare_cycle = prepare


def test_mark_race_has_one_winner(kernels):
    for _ in range(50):
        buf = bytearray([1])
        wins = []
        barrier = threading.Barrier(8)

        def racer():
            barrier.wait()
            wins.append(kernels.try_mark(buf, 0, 2))
        threads = [threading.Thread(target=racer) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(wins) == [0] * 7 + [1]
        assert buf[0] == 2


def test_empty_graph_frees_everything(mmc):
    heap, m = mmc(8)
    for _ in range(500):
        m.allocate(VECTOR, 2)
    m.collect()
    space = heap.space
    assert space.lists.count(BlockState.UNSWEPT) == 0
    assert heap.cycles[-1].marked == 0
    assert space.lists.count(BlockState.EMPTY) + space.lists.count(
        BlockState.EVACUATION_RESERVE) == space.committed


def test_depth_four_tree_marks_31(mmc):
    heap, m = mmc(8)
    m.push(tree(m, 4))
    m.collect()
    c = heap.cycles[-1]
    assert c.marked == 31 == census(heap, m.stack).objects
    assert c.processed == c.marked
    assert c.epoch_after == 3 and c.epoch_before == 2


def test_immediates_are_ignored(mmc):
    heap, m = mmc(4)
    m.push(fixnum(5))
    m.push(12)
    m.collect()
    assert heap.cycles[-1].marked == 0 and m.stack == [fixnum(5), 12]


def test_workers_mark_identical_sets(mmc):
    results = []
    for workers in (1, 8):
        heap, m = mmc(16, workers=workers)
        start, end = build_random_graph(m, SplitMix64(99), objects=400, roots=6)
        m.collect()
        results.append((census(heap, m.stack).checksum, heap.cycles[-1].marked,
                        sorted(reachable(heap, m.stack))))
    assert results[0] == results[1]


def test_repeated_cycles_are_stable(mmc):
    heap, m = mmc(16, workers=4)
    build_random_graph(m, SplitMix64(5), objects=300)
    counts = []
    for _ in range(3):
        m.collect()
        counts.append(heap.cycles[-1].marked)
    assert counts[1] == counts[2]
    assert counts[0] == counts[1]


def test_no_lost_work_with_stealing(mmc):
    heap, m = mmc(32, workers=8)
    # A wide tree spills worklists and gives thieves something to take.
    v = m.allocate(VECTOR, 600)
    m.push(v)
    for i in range(600):
        m.vector_set(m.stack[0], i, tree(m, 3))
    m.collect()
    c = heap.cycles[-1]
    assert c.processed == c.marked == 1 + 600 * 15


def test_small_fifo_spills_to_deque(mmc):
    from nofl.tracer import Tracer
    heap, m = mmc(8, workers=2)
    m.push(tree(m, 8))
    space = heap.space
    for core in [mu.core for mu in heap.mutators]:
        space.release(core)
    space.prepare_cycle()
    tracer = Tracer(heap, 2, fifo_capacity=4)
    tracer.scan_roots(heap.root_lists())
    tracer.run()
    tracer.release_cores()
    space.finish_cycle(tracer.live_counts())
    processed = sum(w.processed for w in tracer.workers)
    assert processed == sum(w.newly_marked for w in tracer.workers) == 511


def test_steal_deque_loses_nothing():
    d = StealDeque()
    n = 20000
    stolen = [[] for _ in range(3)]
    popped = []
    done = threading.Event()

    def thief(out):
        while not done.is_set() or len(d):
            item = d.steal()
            if item is not None:
                out.append(item)

    threads = [threading.Thread(target=thief, args=(s,)) for s in stolen]
    for t in threads:
        t.start()
    rng = random.Random(1)
    for i in range(n):
        d.push(i)
        if rng.random() < 0.4:
            item = d.pop()
            if item is not None:
                popped.append(item)
    done.set()
    for t in threads:
        t.join()
    everything = popped + [x for s in stolen for x in s]
    assert sorted(everything) == list(range(n))


def test_candidate_object_is_copied(mmc):
    heap, m = mmc(8, workers=1, record_forwarding=True)
    obj = m.allocate(VECTOR, 3)
    for i in range(3):
        m.vector_set(obj, i, fixnum(i + 40))
    m.push(obj)
    words, wi = heap.locate(obj)
    before = bytes(words[wi:wi + 4])
    force_candidate(heap, lambda space: space.block_for(obj))
    old_block = heap.space.block_for(obj)
    m.collect()
    new = m.stack[0]
    assert new != obj
    assert heap.cycles[-1].forwarded == [(obj, new)]
    words, wi = heap.locate(new)
    assert bytes(words[wi:wi + 4]) == before
    slab, i = heap.space.meta_index(new)
    assert list(slab.buf[i:i + 2]) == [heap.space.epoch, 32]
    old_words, owi = heap.locate(obj)
    assert is_forwarded(old_words[owi]) and forwarded_address(old_words[owi]) == new
    assert old_block.state is BlockState.EMPTY


def test_pinned_object_in_candidate_stays(mmc):
    heap, m = mmc(8, workers=1)
    obj = m.allocate(BOX)
    m.store(obj, 1, fixnum(3))
    m.push(obj)
    m.pin(m.stack[0])
    m.pin(m.stack[0])
    assert heap.is_pinned(obj)
    force_candidate(heap, lambda space: space.block_for(obj))
    m.collect()
    assert m.stack[0] == obj
    m.unpin(obj)
    assert not heap.is_pinned(obj)
    force_candidate(heap, lambda space: space.block_for(obj))
    m.collect()
    assert m.stack[0] != obj


def test_shared_object_forwarded_once(mmc):
    heap, m = mmc(8, workers=8, record_forwarding=True)
    shared = m.allocate(BOX)
    m.push(shared)
    holders = m.allocate(VECTOR, 200)
    m.push(holders)
    for i in range(200):
        b = m.allocate(BOX)
        m.store(b, 1, m.stack[0])
        m.vector_set(m.stack[1], i, b)
    shared = m.stack[0]
    force_candidate(heap, lambda space: space.block_for(shared))
    m.collect()
    fw = heap.cycles[-1].forwarded
    assert len(fw) == len({a for a, _ in fw}) == len({b for _, b in fw})
    targets = {m.load(m.vector_ref(m.stack[1], i), 1) for i in range(200)}
    assert targets == {m.stack[0]}


def test_reserve_exhaustion_falls_back(mmc):
    heap, m = mmc(8, workers=1, reserve_fraction=0.0)
    n = 10000
    m.push(m.allocate(VECTOR, n))
    for i in range(n):
        b = m.allocate(BOX)
        m.store(b, 1, fixnum(i))
        m.vector_set(m.stack[0], i, b)
    before = census(heap, m.stack)
    old = [m.vector_ref(m.stack[0], i) for i in range(n)]
    full = {heap.space.block_for(a) for a in old}
    assert len(full) == 3
    force_candidate(heap, lambda space: sorted(full, key=lambda b: b.index))
    m.collect()
    c = heap.cycles[-1]
    # One reserve block cannot take three blocks of survivors.
    assert c.evacuated > 0 and c.fallbacks >= 1
    assert census(heap, m.stack).checksum == before.checksum
    new = [m.vector_ref(m.stack[0], i) for i in range(n)]
    assert sum(a == b for a, b in zip(old, new)) > 0


def test_bad_reference_is_fatal(mmc):
    heap, m = mmc(4)
    m.push(0x1000)
    with pytest.raises(HeapCorruption):
        m.collect()


def test_interior_reference_is_fatal(mmc):
    heap, m = mmc(4)
    v = m.allocate(VECTOR, 6)
    m.push(v + 16)
    with pytest.raises(HeapCorruption):
        m.collect()


def test_heap_exhaustion(mmc):
    heap, m = mmc(3)
    v = m.allocate(VECTOR, 1000)
    m.push(v)
    with pytest.raises(HeapExhausted):
        for i in range(100000):
            m.vector_set(m.stack[0], i % 1000, m.allocate(BYTES, 4000))
            if i % 1000 == 999:
                nv = m.allocate(VECTOR, 1000)
                m.vector_set(nv, 0, m.stack[0])
                m.stack[0] = nv


def test_grow_policy_expands_heap(mmc):
    heap, m = mmc(3, sizing="grow", multiplier=2.0)
    v = m.allocate(VECTOR, 1000)
    m.push(v)
    for i in range(300):
        m.vector_set(m.stack[0], i, m.allocate(BYTES, 2000))
    assert heap.heap_bytes > 3 * 69632
    assert census(heap, m.stack).objects == 301


def test_two_requests_one_cycle(mmc):
    heap, m0 = mmc(8)
    m1 = heap.attach()
    results = {}

    def run(m, key):
        results[key] = heap.collect(m, "test")
    t0 = threading.Thread(target=run, args=(m0, 0))
    t0.start()
    # The second request arrives while the first waits for it to park.
    while not heap.stop_requested:
        threading.Event().wait(0.001)
    t1 = threading.Thread(target=run, args=(m1, 1))
    t1.start()
    t0.join(10)
    t1.join(10)
    assert results == {0: True, 1: False}
    assert len(heap.cycles) == 1


def test_handshake_stress(mmc):
    heap, _ = mmc(64, workers=4)
    heap.detach(heap.mutators[0])
    sums = {}
    errors = []

    def worker(k):
        try:
            m = heap.attach()
            rng = random.Random(k)
            m.push(tree(m, 5))
            expected = census(heap, m.stack).checksum
            for i in range(400):
                if rng.random() < 0.5:
                    m.safepoint()
                tree(m, rng.randrange(1, 4))
                if k == 0 and i % 100 == 50:
                    m.collect()
            sums[k] = (expected, census(heap, m.stack).checksum)
            heap.detach(m)
        except Exception as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert all(a == b for a, b in sums.values()) and len(sums) == 4
    assert len(heap.cycles) >= 4


def test_global_roots(mmc):
    heap, m = mmc(8)
    heap.register_root("keep", tree(m, 3))
    m.collect()
    assert census(heap, [heap.root("keep")]).objects == 15
    heap.set_root("keep", 0)
    m.collect()
    assert heap.cycles[-1].marked == 0


def test_verbose_logs_each_cycle(mmc, caplog):
    heap, m = mmc(4, verbose=True)
    with caplog.at_level("INFO", logger="nofl.gc"):
        m.collect()
    assert "pause_wall_ns" in caplog.text and "epoch=3" in caplog.text


def test_poison_mode_keeps_benchmarks_correct(mmc):
    from nofl.bench.workloads import GcbenchParams, run_gcbench
    heap, m = mmc(5, poison=True, workers=2)
    clean_heap, clean = mmc(64)
    a = run_gcbench(m, GcbenchParams(max_depth=8))
    b = run_gcbench(clean, GcbenchParams(max_depth=8))
    assert len(heap.cycles) > 3
    assert a.checksum == b.checksum
