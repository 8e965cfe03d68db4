"""Single-address-space memory: buddy-allocated service regions and a
translation-cost model.

All service memory is carved from one contiguous arena using power-of-2
buckets (a buddy allocator), so every region is naturally aligned to its own
length.  That alignment is what makes a static segment mapping possible:
``simulate_translation`` quantifies the difference between conventional
paging with a TLB (misses cost a page walk) and a statically configured
segment mapping (no page walks, ever).

Allocator state is mutated only under its internal lock; translation
simulation is pure.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

MIN_REGION = 65536  # matches the sandbox page size
MIN_CLASS = MIN_REGION.bit_length() - 1  # 16


class SasmemError(Exception):
    pass


class ZeroSize(SasmemError):
    pass


class OutOfArena(SasmemError):
    pass


class UnknownOwner(SasmemError):
    pass


class DuplicateOwner(SasmemError):
    pass


class OffsetOutOfRegion(SasmemError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length() if n > 1 else 1


@dataclass
class Region:
    """One service's slice of the arena: length is a power of 2 and the base
    is length-aligned."""

    base: int
    length: int
    owner: str
    bucket_class: int
    _backing: bytearray | None = field(default=None, repr=False, compare=False)
    claimed_by: str | None = field(default=None, compare=False)

    def view(self) -> memoryview:
        if self._backing is None:
            raise SasmemError("region has no backing storage")
        return memoryview(self._backing)[self.base : self.base + self.length]

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > self.length:
            raise OffsetOutOfRegion(f"read [{offset}, {offset + length}) in region of {self.length}")
        return bytes(self.view()[offset : offset + length])

    def write(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.length:
            raise OffsetOutOfRegion(f"write [{offset}, {offset + len(data)}) in region of {self.length}")
        self.view()[offset : offset + len(data)] = data


class AllocatorState:
    """Buddy allocator over one arena.

    Free blocks are tracked per bucket class (log2 of block size); freeing
    re-merges a block with its buddy recursively, so a fully freed arena is
    again a single block.  Pass ``backed=True`` to attach real bytes that
    regions can read and write.
    """

    def __init__(self, arena_size: int, *, backed: bool = False):
        if not _is_pow2(arena_size) or arena_size < MIN_REGION:
            raise ValueError(f"arena size must be a power of 2 >= {MIN_REGION}, got {arena_size}")
        self.arena_size = arena_size
        self.top_class = arena_size.bit_length() - 1
        self._free: dict[int, set[int]] = {c: set() for c in range(MIN_CLASS, self.top_class + 1)}
        self._free[self.top_class].add(0)
        self._regions: dict[str, Region] = {}
        self._backing = bytearray(arena_size) if backed else None
        self._lock = threading.Lock()

    # -- census ------------------------------------------------------------

    def region_of(self, owner: str) -> Region:
        with self._lock:
            try:
                return self._regions[owner]
            except KeyError:
                raise UnknownOwner(owner) from None

    def regions(self) -> dict[str, Region]:
        with self._lock:
            return dict(self._regions)

    def free_bytes(self) -> int:
        with self._lock:
            return sum(len(blocks) << c for c, blocks in self._free.items())

    def allocated_bytes(self) -> int:
        with self._lock:
            return sum(r.length for r in self._regions.values())

    def fragmentation_report(self) -> dict[int, tuple[int, int]]:
        """Census of the buddy structure: bucket_class -> (free, allocated)
        block counts.  Classes with no blocks are omitted."""
        with self._lock:
            counts: dict[int, list[int]] = {}
            for c, blocks in self._free.items():
                if blocks:
                    counts[c] = [len(blocks), 0]
            for r in self._regions.values():
                counts.setdefault(r.bucket_class, [0, 0])[1] += 1
            return {c: (f, a) for c, (f, a) in sorted(counts.items())}

    # -- allocate / free ----------------------------------------------------

    def allocate_region(self, owner: str, size: int) -> Region:
        """Carve a region of the next power of 2 >= max(size, MIN_REGION),
        buddy-split from the smallest sufficient free block."""
        if size < 1:
            raise ZeroSize(f"allocation size must be >= 1, got {size}")
        want = max(next_pow2(size), MIN_REGION)
        cls = want.bit_length() - 1
        with self._lock:
            if owner in self._regions:
                raise DuplicateOwner(owner)
            if cls > self.top_class:
                raise OutOfArena(f"{want} bytes exceeds arena of {self.arena_size}")
            donor = None
            for c in range(cls, self.top_class + 1):
                if self._free[c]:
                    donor = c
                    break
            if donor is None:
                raise OutOfArena(f"no free block of {want} bytes")
            base = min(self._free[donor])
            self._free[donor].discard(base)
            while donor > cls:
                donor -= 1
                self._free[donor].add(base + (1 << donor))
            region = Region(base=base, length=want, owner=owner, bucket_class=cls, _backing=self._backing)
            self._regions[owner] = region
            return region

    def free_region(self, owner: str) -> None:
        """Return the owner's block to its free list, merging free buddies."""
        with self._lock:
            region = self._regions.pop(owner, None)
            if region is None:
                raise UnknownOwner(owner)
            base, cls = region.base, region.bucket_class
            while cls < self.top_class:
                buddy = base ^ (1 << cls)
                if buddy not in self._free[cls]:
                    break
                self._free[cls].discard(buddy)
                base = min(base, buddy)
                cls += 1
            self._free[cls].add(base)


# -- address translation model ---------------------------------------------


@dataclass(frozen=True)
class PagedTlb:
    """Conventional paging: fully associative TLB with LRU replacement."""

    page_size: int
    tlb_entries: int

    def __post_init__(self):
        if not _is_pow2(self.page_size):
            raise ValueError(f"page_size must be a power of 2, got {self.page_size}")
        if self.tlb_entries < 1:
            raise ValueError("tlb_entries must be >= 1")


@dataclass(frozen=True)
class StaticSegment:
    """Statically configured base+length mapping: translation never walks."""


TranslationMode = PagedTlb | StaticSegment


@dataclass(frozen=True)
class TranslationStats:
    mode: str
    accesses: int
    tlb_hits: int
    page_walks: int
    distinct_pages: int

    def csv_row(self) -> str:
        return f"{self.mode},{self.accesses},{self.tlb_hits},{self.page_walks},{self.distinct_pages}"


def simulate_translation(trace, region: Region, mode: TranslationMode) -> TranslationStats:
    """Replay a trace of region-relative byte offsets through a translation model.

    StaticSegment resolves every access without a walk.  PagedTlb is an exact
    fully-associative LRU simulation: a miss costs one page walk and inserts
    the page, evicting the least recently used entry when full.
    """
    if isinstance(mode, StaticSegment):
        n = 0
        for off in trace:
            if off < 0 or off >= region.length:
                raise OffsetOutOfRegion(f"offset {off} outside region of {region.length}")
            n += 1
        return TranslationStats(
            mode="static_segment",
            accesses=n,
            tlb_hits=n,
            page_walks=0,
            distinct_pages=1 if n else 0,
        )

    if region.length % mode.page_size != 0:
        raise ValueError("page_size must divide region length")
    limit = region.length
    shift = mode.page_size.bit_length() - 1
    base_page = region.base >> shift
    capacity = mode.tlb_entries
    tlb: OrderedDict[int, None] = OrderedDict()
    seen: set[int] = set()
    hits = walks = n = 0
    for off in trace:
        if off < 0 or off >= limit:
            raise OffsetOutOfRegion(f"offset {off} outside region of {limit}")
        page = base_page + (off >> shift)
        n += 1
        if page in tlb:
            hits += 1
            tlb.move_to_end(page)
        else:
            walks += 1
            seen.add(page)
            tlb[page] = None
            if len(tlb) > capacity:
                tlb.popitem(last=False)
    return TranslationStats(
        mode=f"paged_tlb_{mode.page_size}_{mode.tlb_entries}",
        accesses=n,
        tlb_hits=hits,
        page_walks=walks,
        distinct_pages=len(seen),
    )
