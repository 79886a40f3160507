"""Deterministic heap allocator models.

The heap objects carry their own configuration; the module-level functions
below are thin wrappers named after the operations they perform.
"""

from .config import (
    DEFAULT_CAPACITY,
    MAPPED_BASE,
    PROFILE_NAMES,
    AllocatorConfig,
    Coalescing,
    ConfigError,
    FitPolicy,
    FreeListOrg,
    Kind,
    LargeStrategy,
    Route,
    SplitFrom,
    footprint,
    load_config,
    profile,
    round_up,
    size_class_of,
)
from .heap import (
    Block,
    FreeListHeap,
    HeapError,
    InvalidFree,
    OutOfMemory,
    SegregatedHeap,
    SizeClassRun,
    SizeOverflow,
    new_heap,
)


def alloc(heap, size, tag=None):
    return heap.alloc(size, tag)


def dealloc(heap, address):
    heap.free(address)


def realloc_op(heap, address, new_size, tag=None):
    return heap.realloc(address, new_size, tag)


def calloc_op(heap, nmemb, size, tag=None):
    return heap.calloc(nmemb, size, tag)


def find_fit(heap, rounded_size):
    return heap.find_fit(rounded_size)


def heap_snapshot(heap):
    return heap.snapshot()


__all__ = [name for name in dir() if not name.startswith("_")]
