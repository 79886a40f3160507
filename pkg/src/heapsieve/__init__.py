"""Heap layout manipulation toolkit: allocator models, a directive driver,
and black-box search for relative placements of two allocations."""

__version__ = "0.1.0"
