from __future__ import annotations

import random

import pytest

from meshwa.sasmem import (
    AllocatorState,
    DuplicateOwner,
    OffsetOutOfRegion,
    OutOfArena,
    PagedTlb,
    Region,
    StaticSegment,
    UnknownOwner,
    ZeroSize,
    next_pow2,
    simulate_translation,
)

MIB = 1 << 20


# -- buddy allocator -----------------------------------------------------------


def test_next_pow2():
    assert next_pow2(1) == 1
    assert next_pow2(2) == 2
    assert next_pow2(3) == 4
    assert next_pow2(5 * MIB) == 8 * MIB


def test_allocation_rounds_to_pow2_and_min():
    state = AllocatorState(16 * MIB)
    region = state.allocate_region("a", 5 * MIB)
    assert region.length == 8 * MIB
    assert region.bucket_class == 23
    small = state.allocate_region("b", 1)
    assert small.length == 65536


def test_zero_size_rejected():
    state = AllocatorState(16 * MIB)
    with pytest.raises(ZeroSize):
        state.allocate_region("a", 0)


def test_exhaustion_matches_buddy_oracle():
    # two 8 MiB splits consume a 16 MiB arena entirely
    state = AllocatorState(16 * MIB)
    state.allocate_region("a", 8 * MIB)
    state.allocate_region("b", 8 * MIB)
    assert state.free_bytes() == 0
    with pytest.raises(OutOfArena):
        state.allocate_region("c", 1)


def test_alignment_invariant():
    state = AllocatorState(16 * MIB)
    for i, size in enumerate([70000, 65536, 3 * MIB, 1]):
        r = state.allocate_region(f"s{i}", size)
        assert r.base % r.length == 0


def test_free_restores_initial_state():
    state = AllocatorState(16 * MIB)
    before = state.fragmentation_report()
    state.allocate_region("a", 65536)
    state.free_region("a")
    assert state.fragmentation_report() == before == {24: (1, 0)}


def test_free_unknown_owner():
    state = AllocatorState(16 * MIB)
    with pytest.raises(UnknownOwner):
        state.free_region("ghost")


def test_duplicate_owner_rejected():
    state = AllocatorState(16 * MIB)
    state.allocate_region("a", 1)
    with pytest.raises(DuplicateOwner):
        state.allocate_region("a", 1)


def test_sibling_buddies_merge():
    state = AllocatorState(16 * MIB)
    a = state.allocate_region("a", 65536)
    b = state.allocate_region("b", 65536)
    assert a.base ^ b.base == 65536  # buddies of each other
    state.free_region("a")
    state.free_region("b")
    # merged all the way back to one arena-sized block
    assert state.fragmentation_report() == {24: (1, 0)}


def test_fragmentation_census_after_single_split():
    state = AllocatorState(16 * MIB)
    state.allocate_region("a", 65536)
    report = state.fragmentation_report()
    assert report[16] == (1, 1)
    for cls in range(17, 24):
        assert report[cls] == (1, 0)
    assert 24 not in report


def test_conservation_and_disjointness_random_sequences():
    rng = random.Random(7)
    state = AllocatorState(16 * MIB)
    live: dict[str, tuple[int, int]] = {}  # oracle: owner -> (base, length)
    counter = 0
    for _ in range(2000):
        if live and rng.random() < 0.45:
            owner = rng.choice(list(live))
            state.free_region(owner)
            del live[owner]
        else:
            counter += 1
            owner = f"o{counter}"
            size = rng.randrange(1, 3 * MIB)
            try:
                r = state.allocate_region(owner, size)
            except OutOfArena:
                continue
            assert r.base % r.length == 0
            for base, length in live.values():
                assert r.base + r.length <= base or base + length <= r.base
            live[owner] = (r.base, r.length)
        assert state.free_bytes() + state.allocated_bytes() == 16 * MIB
    for owner in list(live):
        state.free_region(owner)
    assert state.fragmentation_report() == {24: (1, 0)}


def test_backed_region_read_write_bounds():
    state = AllocatorState(16 * MIB, backed=True)
    r = state.allocate_region("a", 65536)
    r.write(0, b"hello")
    assert r.read(0, 5) == b"hello"
    with pytest.raises(OffsetOutOfRegion):
        r.read(65536 - 2, 4)
    with pytest.raises(OffsetOutOfRegion):
        r.write(-1, b"x")


# -- translation model -----------------------------------------------------------


def region(length=1 << 20, base=0) -> Region:
    return Region(base=base, length=length, owner="t", bucket_class=length.bit_length() - 1)


def naive_lru(trace, region_, page_size, entries):
    """Reference simulator: plain list, front = least recently used."""
    lst: list[int] = []
    hits = walks = 0
    pages = set()
    for off in trace:
        page = (region_.base + off) // page_size
        if page in lst:
            hits += 1
            lst.remove(page)
            lst.append(page)
        else:
            walks += 1
            pages.add(page)
            lst.append(page)
            if len(lst) > entries:
                lst.pop(0)
    return hits, walks, len(pages)


def test_static_segment_never_walks():
    rng = random.Random(1)
    r = region()
    trace = [rng.randrange(r.length) for _ in range(5000)]
    stats = simulate_translation(trace, r, StaticSegment())
    assert stats.page_walks == 0
    assert stats.tlb_hits == stats.accesses == 5000


def test_single_page_one_cold_miss():
    r = region()
    trace = [i % 4096 for i in range(100)]
    stats = simulate_translation(trace, r, PagedTlb(4096, 64))
    assert stats.page_walks == 1
    assert stats.tlb_hits == 99
    assert stats.distinct_pages == 1


def test_one_entry_tlb_thrashes_on_alternation():
    r = region()
    trace = [0 if i % 2 == 0 else 4096 for i in range(100)]
    stats = simulate_translation(trace, r, PagedTlb(4096, 1))
    assert stats.page_walks == 100
    assert stats.tlb_hits == 0
    assert stats.distinct_pages == 2


def test_offset_out_of_region():
    r = region()
    with pytest.raises(OffsetOutOfRegion):
        simulate_translation([r.length], r, StaticSegment())
    with pytest.raises(OffsetOutOfRegion):
        simulate_translation([-1], r, PagedTlb(4096, 4))


def test_page_size_must_divide_region():
    r = Region(base=0, length=65536, owner="t", bucket_class=16)
    with pytest.raises(ValueError):
        simulate_translation([0], r, PagedTlb(131072, 4))


def test_lru_matches_naive_oracle_on_random_traces():
    rng = random.Random(42)
    for _ in range(25):
        length = 1 << rng.randrange(17, 22)
        r = region(length, base=rng.randrange(0, 4) * length)
        page_size = 1 << rng.randrange(12, 15)
        entries = rng.choice([1, 2, 4, 8, 16])
        trace = [rng.randrange(length) for _ in range(3000)]
        stats = simulate_translation(trace, r, PagedTlb(page_size, entries))
        hits, walks, distinct = naive_lru(trace, r, page_size, entries)
        assert (stats.tlb_hits, stats.page_walks, stats.distinct_pages) == (hits, walks, distinct)
        assert stats.tlb_hits + stats.page_walks == stats.accesses


def test_stats_csv_row():
    r = region()
    stats = simulate_translation([0, 0, 4096], r, PagedTlb(4096, 8))
    assert stats.csv_row() == "paged_tlb_4096_8,3,1,2,2"
    static = simulate_translation([0], r, StaticSegment())
    assert static.csv_row() == "static_segment,1,1,0,1"
