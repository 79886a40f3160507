"""Allocator policy descriptions and the named profiles shipped with the package."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

DEFAULT_CAPACITY = 1 << 30
MAPPED_BASE = 1 << 40
NO_LARGE = 1 << 62


class Kind(str, enum.Enum):
    FREE_LIST = "free-list"
    SEGREGATED_STORAGE = "segregated-storage"


class FitPolicy(str, enum.Enum):
    BEST_FIT = "best-fit"
    FIRST_FIT = "first-fit"
    NEXT_FIT = "next-fit"


class SplitFrom(str, enum.Enum):
    FRONT = "front"
    END = "end"


class Coalescing(str, enum.Enum):
    IMMEDIATE = "immediate"
    DELAYED = "delayed"
    NEVER = "never"


class FreeListOrg(str, enum.Enum):
    SINGLE = "single"
    SEGREGATED = "segregated"


class LargeStrategy(str, enum.Enum):
    PAGE_BEST_FIT = "page-best-fit"
    MAPPED_REGION = "mapped-region"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AllocatorConfig:
    kind: Kind = Kind.FREE_LIST
    fit_policy: FitPolicy = FitPolicy.BEST_FIT
    split_from: SplitFrom = SplitFrom.FRONT
    coalescing: Coalescing = Coalescing.IMMEDIATE
    delay_threshold: int = 32
    free_list_org: FreeListOrg = FreeListOrg.SINGLE
    class_upper_bounds: tuple = ()
    header_bytes: int = 0
    alignment: int = 8
    # None means alignment + header_bytes
    min_split_remainder: int | None = None
    large_threshold: int = NO_LARGE
    large_strategy: LargeStrategy = LargeStrategy.MAPPED_REGION
    page_size: int = 4096
    size_classes: tuple = ()
    run_pages: int = 1
    capacity: int = DEFAULT_CAPACITY
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        # accept plain strings/lists from callers and coerce
        for f, enum_type in (
            ("kind", Kind),
            ("fit_policy", FitPolicy),
            ("split_from", SplitFrom),
            ("coalescing", Coalescing),
            ("free_list_org", FreeListOrg),
            ("large_strategy", LargeStrategy),
        ):
            object.__setattr__(self, f, enum_type(getattr(self, f)))
        object.__setattr__(self, "class_upper_bounds", tuple(self.class_upper_bounds))
        object.__setattr__(self, "size_classes", tuple(self.size_classes))
        if self.min_split_remainder is None:
            object.__setattr__(self, "min_split_remainder", self.alignment + self.header_bytes)
        self.validate()

    def validate(self):
        a = self.alignment
        if a < 1 or a & (a - 1):
            raise ConfigError(f"alignment must be a power of two >= 1, got {a}")
        if self.header_bytes < 0:
            raise ConfigError("header_bytes must be >= 0")
        if self.min_split_remainder < 1:
            raise ConfigError("min_split_remainder must be >= 1")
        if self.coalescing is Coalescing.DELAYED and self.delay_threshold < 1:
            raise ConfigError("delayed coalescing threshold must be >= 1")
        if self.page_size < 1 or self.page_size & (self.page_size - 1) or self.run_pages < 1:
            raise ConfigError("page_size must be a power of two and run_pages >= 1")
        if list(self.class_upper_bounds) != sorted(set(self.class_upper_bounds)):
            raise ConfigError("class_upper_bounds must be strictly ascending")
        if self.kind is Kind.SEGREGATED_STORAGE:
            sc = self.size_classes
            if not sc:
                raise ConfigError("segregated storage needs size_classes")
            if list(sc) != sorted(set(sc)) or sc[0] < 1:
                raise ConfigError("size_classes must be strictly ascending positive sizes")
            if sc[-1] >= self.large_threshold:
                raise ConfigError("largest size class must be below large_threshold")
            if self.header_bytes:
                raise ConfigError("segregated storage keeps no inline headers")

    @property
    def immediate(self):
        return self.coalescing is Coalescing.IMMEDIATE

    def replace(self, **changes):
        if "alignment" in changes or "header_bytes" in changes:
            changes.setdefault("min_split_remainder", None)
        return dataclasses.replace(self, **changes)

    # -- JSON ---------------------------------------------------------------

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "name":
                continue
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name.replace("_", "-")] = v
        return out

    @classmethod
    def from_dict(cls, data, name="custom"):
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            attr = key.replace("-", "_")
            if attr not in known or attr == "name":
                raise ConfigError(f"unknown allocator config key {key!r}")
            kwargs[attr] = value
        return cls(name=name, **kwargs)


def round_up(n, multiple):
    return -(-n // multiple) * multiple


class Route(NamedTuple):
    """Where a request is served and the footprint it occupies there."""

    kind: str  # "free-list" | "small" | "page" | "mapped"
    size: int


def size_class_of(config: AllocatorConfig, size: int) -> Route:
    if size < 1:
        raise ValueError("request size must be >= 1")
    page = config.page_size
    if size >= config.large_threshold:
        if config.large_strategy is LargeStrategy.MAPPED_REGION:
            return Route("mapped", round_up(size + config.header_bytes, page))
        if config.kind is Kind.FREE_LIST:
            return Route("free-list", round_up(size + config.header_bytes, page))
        return Route("page", round_up(size, page))
    if config.kind is Kind.FREE_LIST:
        return Route("free-list", round_up(size + config.header_bytes, config.alignment))
    classes = config.size_classes
    if size <= classes[-1]:
        lo, hi = 0, len(classes) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if classes[mid] >= size:
                hi = mid
            else:
                lo = mid + 1
        return Route("small", classes[lo])
    return Route("page", round_up(size, page))


def footprint(config: AllocatorConfig, size: int) -> int:
    """Bytes a request of ``size`` occupies, header and rounding included."""
    return size_class_of(config, size).size


# -- named profiles -----------------------------------------------------------

PROFILE_NAMES = ("ideal", "avrlibc-like", "dlmalloc-like", "tcmalloc-like", "php-like")


def load_config(path) -> AllocatorConfig:
    path = Path(path)
    data = json.loads(path.read_text())
    return AllocatorConfig.from_dict(data, name=path.stem)


def profile(name: str) -> AllocatorConfig:
    """Shipped allocator profile by name, or a JSON config file path."""
    if name in PROFILE_NAMES:
        text = resources.files("heapsieve.data.profiles").joinpath(f"{name}.json").read_text()
        return AllocatorConfig.from_dict(json.loads(text), name=name)
    p = Path(name)
    if p.suffix == ".json" and p.exists():
        return load_config(p)
    raise ConfigError(f"unknown allocator profile {name!r}; shipped: {', '.join(PROFILE_NAMES)}")
