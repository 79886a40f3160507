"""Reference heap simulators.

Two concrete heaps share one interface (``alloc``, ``free``, ``realloc``,
``calloc``, ``find_fit``, ``snapshot``, ``copy``):

* ``FreeListHeap`` models splitting/coalescing allocators (avrlibc, dlmalloc).
  Blocks tile the arena from offset 0 up to the wilderness; requests that fit
  no free block are carved from the wilderness.
* ``SegregatedHeap`` models size-class runs on top of a page-granular
  ``FreeListHeap`` (tcmalloc, PHP).

Addresses are byte offsets. Mapped-region allocations live above
``MAPPED_BASE`` and are never reused once unmapped.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from dataclasses import dataclass

from .config import (
    MAPPED_BASE,
    AllocatorConfig,
    Coalescing,
    FitPolicy,
    FreeListOrg,
    Kind,
    SplitFrom,
    size_class_of,
)

MAX_SIZE = (1 << 64) - 1


class HeapError(Exception):
    pass


class OutOfMemory(HeapError):
    def __init__(self, request, capacity):
        super().__init__(f"arena exhausted: {request} bytes requested, capacity {capacity}")
        self.request = request
        self.capacity = capacity


class InvalidFree(HeapError):
    def __init__(self, address):
        super().__init__(f"invalid free of address {address:#x}")
        self.address = address


class SizeOverflow(HeapError):
    pass


@dataclass(frozen=True)
class Block:
    offset: int
    footprint: int
    state: str  # "alloc" | "free" | "slack" (unusable run tail)
    region: str = "arena"  # "arena" | "mapped"
    tag: str | None = None

    @property
    def end(self):
        return self.offset + self.footprint


class FreeListHeap:
    """Splitting/coalescing allocator over a single arena."""

    def __init__(self, config: AllocatorConfig):
        self.config = config
        self.header = config.header_bytes
        self.used = {}  # block offset -> footprint
        self.free_blocks = {}  # block offset -> footprint
        self.free_end = {}  # end offset -> start, free blocks only
        self.bins = {}  # footprint -> {offset: None}; dict order is free order
        self.sizes = []  # footprints with a non-empty bin, ascending
        bounds = config.class_upper_bounds if config.free_list_org is FreeListOrg.SEGREGATED else ()
        self.class_bounds = list(bounds)
        self.lists = [{} for _ in range(len(self.class_bounds) + 1)]
        self.cursor = None  # next-fit position: offset of a free block, None = head
        self.wilderness = 0
        self.pending = 0
        self.mapped = {}
        self.mapped_cursor = MAPPED_BASE
        self.tags = {}

    # -- bookkeeping ----------------------------------------------------------

    def _class_index(self, fp):
        return bisect_left(self.class_bounds, fp)

    def _push_free(self, off, fp):
        self.free_blocks[off] = fp
        self.free_end[off + fp] = off
        b = self.bins.get(fp)
        if b is None:
            b = self.bins[fp] = {}
            insort(self.sizes, fp)
        b[off] = None
        self.lists[self._class_index(fp)][off] = None

    def _pop_free(self, off):
        if self.cursor == off:
            self.cursor = self._entry_after(off)
        fp = self.free_blocks.pop(off)
        del self.free_end[off + fp]
        b = self.bins[fp]
        del b[off]
        if not b:
            del self.bins[fp]
            del self.sizes[bisect_left(self.sizes, fp)]
        del self.lists[self._class_index(fp)][off]
        return fp

    def _free_order(self):
        """Free blocks in free-list order: classes ascending, each newest first."""
        for lst in self.lists:
            yield from reversed(lst)

    def _entry_after(self, off):
        it = self._free_order()
        for o in it:
            if o == off:
                return next(it, None)
        return None

    # -- policy ---------------------------------------------------------------

    def find_fit(self, fp):
        """Offset of the free block the fit policy picks for ``fp`` bytes, or None."""
        policy = self.config.fit_policy
        if policy is FitPolicy.BEST_FIT:
            i = bisect_left(self.sizes, fp)
            if i == len(self.sizes):
                return None
            return next(reversed(self.bins[self.sizes[i]]))
        if policy is FitPolicy.FIRST_FIT:
            for ci in range(self._class_index(fp), len(self.lists)):
                for off in reversed(self.lists[ci]):
                    if self.free_blocks[off] >= fp:
                        return off
            return None
        order = list(self._free_order())
        if not order:
            return None
        start = order.index(self.cursor) if self.cursor in self.free_blocks else 0
        n = len(order)
        for k in range(n):
            off = order[(start + k) % n]
            if self.free_blocks[off] >= fp:
                after = start + k + 1
                self.cursor = order[after] if after < n else None
                return off
        return None

    def _carve(self, fp):
        off = self.wilderness
        if off + fp > self.config.capacity:
            raise OutOfMemory(fp, self.config.capacity)
        self.wilderness = off + fp
        return off

    def _place(self, fp):
        """Reserve a block of ``fp`` bytes; returns its offset."""
        off = self.find_fit(fp)
        if off is None:
            off = self._carve(fp)
            self.used[off] = fp
            return off
        bfp = self._pop_free(off)
        rem = bfp - fp
        if rem >= self.config.min_split_remainder:
            if self.config.split_from is SplitFrom.FRONT:
                self._push_free(off + fp, rem)
            else:
                self._push_free(off, rem)
                off += rem
        else:
            fp = bfp
        self.used[off] = fp
        return off

    def _release(self, off, fp):
        """Return a block to the free structures under the coalescing policy."""
        mode = self.config.coalescing
        if mode is Coalescing.IMMEDIATE:
            nxt = off + fp
            if nxt in self.free_blocks:
                fp += self._pop_free(nxt)
            prev = self.free_end.get(off)
            if prev is not None:
                fp += self._pop_free(prev)
                off = prev
            if off + fp == self.wilderness:
                self.wilderness = off
            else:
                self._push_free(off, fp)
            return
        if mode is Coalescing.DELAYED:
            self.pending += (off + fp in self.free_blocks) + (off in self.free_end)
        self._push_free(off, fp)
        if mode is Coalescing.DELAYED and self.pending >= self.config.delay_threshold:
            self.coalesce_all()

    def coalesce_all(self):
        """Merge every run of adjacent free blocks (delayed-coalescing flush)."""
        runs = []
        cur = None
        for off in sorted(self.free_blocks):
            fp = self.free_blocks[off]
            if cur is not None and cur[-1][0] + cur[-1][1] == off:
                cur.append((off, fp))
            else:
                cur = [(off, fp)]
                runs.append(cur)
        for run in runs:
            if len(run) < 2:
                continue
            for off, _ in run:
                self._pop_free(off)
            start = run[0][0]
            self._push_free(start, run[-1][0] + run[-1][1] - start)
        self.pending = 0

    # -- public operations ----------------------------------------------------

    def route(self, size):
        return size_class_of(self.config, size)

    def alloc(self, size, tag=None):
        if size < 1:
            raise ValueError("request size must be >= 1")
        r = size_class_of(self.config, size)
        if r.kind == "mapped":
            off = self.mapped_cursor
            self.mapped_cursor += r.size
            self.mapped[off] = r.size
        else:
            off = self._place(r.size)
        if tag is not None:
            self.tags[off] = tag
        return off + self.header

    def calloc(self, nmemb, size, tag=None):
        total = nmemb * size
        if total > MAX_SIZE:
            raise SizeOverflow(f"calloc({nmemb}, {size}) overflows the size type")
        return self.alloc(total, tag)

    def free(self, address):
        off = address - self.header
        self.tags.pop(off, None)
        if off in self.mapped:
            del self.mapped[off]
            return
        fp = self.used.pop(off, None)
        if fp is None:
            raise InvalidFree(address)
        self._release(off, fp)

    def realloc(self, address, size, tag=None):
        if size < 1:
            raise ValueError("request size must be >= 1")
        off = address - self.header
        r = size_class_of(self.config, size)
        old = self.used.get(off)
        if old is None:
            if off not in self.mapped:
                raise InvalidFree(address)
            if r.kind == "mapped" and r.size == self.mapped[off]:
                if tag is not None:
                    self.tags[off] = tag
                return address
        elif r.kind != "mapped":
            fp = r.size
            if self._resize_in_place(off, old, fp):
                if tag is not None:
                    self.tags[off] = tag
                return address
        new = self.alloc(size, tag)
        self.free(address)
        return new

    def _resize_in_place(self, off, old, fp):
        min_split = self.config.min_split_remainder
        if fp == old:
            return True
        if fp < old:
            rem = old - fp
            if rem >= min_split:
                self.used[off] = fp
                self._release(off + fp, rem)
            return True
        nxt = off + old
        nfp = self.free_blocks.get(nxt)
        if nfp is None or old + nfp < fp:
            return False
        self._pop_free(nxt)
        total = old + nfp
        rem = total - fp
        if rem >= min_split:
            self.used[off] = fp
            self._push_free(off + fp, rem)
        else:
            self.used[off] = total
        return True

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        for name in ("used", "free_blocks", "free_end", "mapped", "tags"):
            setattr(new, name, getattr(self, name).copy())
        new.bins = {k: v.copy() for k, v in self.bins.items()}
        new.sizes = self.sizes.copy()
        new.lists = [lst.copy() for lst in self.lists]
        return new

    def snapshot(self):
        blocks = [Block(o, fp, "alloc", "arena", self.tags.get(o)) for o, fp in self.used.items()]
        blocks += [Block(o, fp, "free") for o, fp in self.free_blocks.items()]
        blocks.sort(key=lambda b: b.offset)
        blocks += [Block(o, fp, "alloc", "mapped", self.tags.get(o)) for o, fp in sorted(self.mapped.items())]
        return blocks


@dataclass
class SizeClassRun:
    class_size: int
    base_offset: int
    slot_count: int
    span: int
    slot_bitmap: list

    def slot_offset(self, i):
        return self.base_offset + i * self.class_size


class SegregatedHeap:
    """Size-class runs carved from a page heap; slots never split or merge.

    Freed slots go on a per-class LIFO stack; a fresh run pushes its slots so
    that the lowest slot is handed out first.
    """

    def __init__(self, config: AllocatorConfig):
        self.config = config
        self.header = 0
        page_cfg = AllocatorConfig(
            kind=Kind.FREE_LIST,
            fit_policy=FitPolicy.BEST_FIT,
            split_from=SplitFrom.FRONT,
            coalescing=config.coalescing,
            delay_threshold=config.delay_threshold,
            alignment=config.page_size,
            min_split_remainder=config.page_size,
            page_size=config.page_size,
            capacity=config.capacity,
            name=f"{config.name}/pages",
        )
        self.pages = FreeListHeap(page_cfg)
        self.runs = []
        self.runs_by_class = {c: [] for c in config.size_classes}
        self.stacks = {c: [] for c in config.size_classes}
        self.slot_owner = {}  # allocated slot offset -> run
        self.page_allocs = set()  # offsets of page-level allocations
        self.mapped = {}
        self.mapped_cursor = MAPPED_BASE
        self.tags = {}

    @property
    def wilderness(self):
        return self.pages.wilderness

    def run_span(self, class_size):
        page = self.config.page_size
        return max(self.config.run_pages, -(-class_size // page)) * page

    def _new_run(self, cls):
        span = self.run_span(cls)
        base = self.pages.alloc(span)
        run = SizeClassRun(cls, base, span // cls, span, [False] * (span // cls))
        self.runs.append(run)
        self.runs_by_class[cls].append(run)
        stack = self.stacks[cls]
        for i in range(run.slot_count - 1, -1, -1):
            stack.append((run.slot_offset(i), run))
        return run

    def route(self, size):
        return size_class_of(self.config, size)

    def alloc(self, size, tag=None):
        if size < 1:
            raise ValueError("request size must be >= 1")
        r = size_class_of(self.config, size)
        if r.kind == "small":
            stack = self.stacks[r.size]
            if not stack:
                self._new_run(r.size)
            off, run = stack.pop()
            run.slot_bitmap[(off - run.base_offset) // r.size] = True
            self.slot_owner[off] = run
        elif r.kind == "page":
            off = self.pages.alloc(r.size)
            self.page_allocs.add(off)
        else:
            off = self.mapped_cursor
            self.mapped_cursor += r.size
            self.mapped[off] = r.size
        if tag is not None:
            self.tags[off] = tag
        return off

    def calloc(self, nmemb, size, tag=None):
        total = nmemb * size
        if total > MAX_SIZE:
            raise SizeOverflow(f"calloc({nmemb}, {size}) overflows the size type")
        return self.alloc(total, tag)

    def free(self, address):
        off = address
        run = self.slot_owner.pop(off, None)
        if run is not None:
            run.slot_bitmap[(off - run.base_offset) // run.class_size] = False
            self.stacks[run.class_size].append((off, run))
        elif off in self.page_allocs:
            self.page_allocs.discard(off)
            self.pages.free(off)
        elif off in self.mapped:
            del self.mapped[off]
        else:
            raise InvalidFree(address)
        self.tags.pop(off, None)

    def footprint_at(self, off):
        run = self.slot_owner.get(off)
        if run is not None:
            return ("small", run.class_size)
        if off in self.page_allocs:
            return ("page", self.pages.used[off])
        if off in self.mapped:
            return ("mapped", self.mapped[off])
        raise InvalidFree(off)

    def realloc(self, address, size, tag=None):
        if size < 1:
            raise ValueError("request size must be >= 1")
        kind, fp = self.footprint_at(address)
        r = size_class_of(self.config, size)
        if r.kind == kind and r.size == fp:
            if tag is not None:
                self.tags[address] = tag
            return address
        new = self.alloc(size, tag)
        self.free(address)
        return new

    def find_fit(self, fp):
        return self.pages.find_fit(fp)

    def copy(self):
        new = object.__new__(SegregatedHeap)
        new.config = self.config
        new.header = 0
        new.pages = self.pages.copy()
        mapping = {}
        new.runs = []
        for run in self.runs:
            c = SizeClassRun(run.class_size, run.base_offset, run.slot_count, run.span, run.slot_bitmap.copy())
            mapping[id(run)] = c
            new.runs.append(c)
        new.runs_by_class = {k: [mapping[id(r)] for r in v] for k, v in self.runs_by_class.items()}
        new.stacks = {k: [(o, mapping[id(r)]) for o, r in v] for k, v in self.stacks.items()}
        new.slot_owner = {o: mapping[id(r)] for o, r in self.slot_owner.items()}
        new.page_allocs = set(self.page_allocs)
        new.mapped = self.mapped.copy()
        new.mapped_cursor = self.mapped_cursor
        new.tags = self.tags.copy()
        return new

    def snapshot(self):
        runs = {r.base_offset: r for r in self.runs}
        out = []
        for b in self.pages.snapshot():
            if b.state == "alloc" and b.offset in runs:
                run = runs[b.offset]
                for i, taken in enumerate(run.slot_bitmap):
                    o = run.slot_offset(i)
                    if taken:
                        out.append(Block(o, run.class_size, "alloc", "arena", self.tags.get(o)))
                    else:
                        out.append(Block(o, run.class_size, "free"))
                used = run.slot_count * run.class_size
                if used < run.span:
                    out.append(Block(run.base_offset + used, run.span - used, "slack"))
            elif b.state == "alloc":
                out.append(Block(b.offset, b.footprint, "alloc", "arena", self.tags.get(b.offset)))
            else:
                out.append(b)
        out += [Block(o, fp, "alloc", "mapped", self.tags.get(o)) for o, fp in sorted(self.mapped.items())]
        return out


def new_heap(config: AllocatorConfig):
    if config.kind is Kind.SEGREGATED_STORAGE:
        return SegregatedHeap(config)
    return FreeListHeap(config)
