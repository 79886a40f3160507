"""Synthetic HLM benchmark grid: starting states, experiments, aggregation.

One experiment asks the search to place a source and a destination buffer
next to each other, in the order that lets an overflow (source below
destination) or underflow (source above destination) reach across. The
buffers are allocated in a fixed order (source first or destination first);
when that order already yields the wanted layout under front splitting the
relationship is natural, otherwise reversed.
"""

from __future__ import annotations

import csv
import io
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .alloc_model import AllocatorConfig, profile, size_class_of
from .driver import Calloc, Free, Malloc, Realloc, execute, DriverProgram, parse_directives, serialize
from .rng import SplitMix64, derive_seed
from .search import (
    Direction,
    InteractionSequence,
    Order,
    Relationship,
    SearchParams,
    SequencePool,
    SimulatedExecutor,
    classify_relationship,
    search,
)

GRID_SIZES = (8, 64, 512, 4096, 16384, 65536)
GRID_NOISES = (0, 1, 4)

# name -> (allocations, frees); interactions = allocations + frees
STATE_COUNTS = {
    "php-emalloc": (366, 205),
    "php-malloc": (12714, 2634),
    "python-malloc": (3710, 2450),
    "ruby-malloc": (51827, 19068),
}
STATE_NAMES = tuple(STATE_COUNTS)
_STATE_SEED = 0x5EED_0000

# request-size buckets for synthetic states: (weight, lo, hi)
_SIZE_BUCKETS = ((60, 1, 64), (30, 65, 256), (8, 257, 2048), (2, 2049, 16384))
# frees pick among this many most recent live buffers; short-lived
# temporaries leave few holes behind, as in a freshly started interpreter
_FREE_WINDOW = 2


@dataclass(frozen=True)
class StateStats:
    interactions: int
    allocs: int
    frees: int


def state_stats(directives) -> StateStats:
    allocs = sum(type(d) in (Malloc, Calloc, Realloc) for d in directives)
    frees = sum(type(d) is Free for d in directives)
    return StateStats(len(directives), allocs, frees)


@dataclass(frozen=True)
class StartingState:
    name: str
    directives: tuple
    stats: StateStats

    def __post_init__(self):
        if state_stats(self.directives) != self.stats:
            raise ValueError(f"starting state {self.name}: stored stats do not match its directives")

    @classmethod
    def from_directives(cls, name, directives):
        directives = tuple(directives)
        return cls(name, directives, state_stats(directives))


def synthesize_state(name, allocs=None, frees=None, seed=None, window=_FREE_WINDOW) -> StartingState:
    """Seeded synthetic starting state.

    Each step frees one of the ``window`` most recently allocated live
    buffers with probability frees_left / steps_left (when something is
    live), else allocates a size drawn from ``_SIZE_BUCKETS``.
    """
    if allocs is None:
        allocs, frees = STATE_COUNTS[name]
    rng = SplitMix64(derive_seed(_STATE_SEED if seed is None else seed, zlib.crc32(name.encode())))
    weights = [w for w, _, _ in _SIZE_BUCKETS]
    live, out = [], []
    a_left, f_left = allocs, frees
    while a_left or f_left:
        total = a_left + f_left
        if f_left and live and (not a_left or rng.randint(1, total) <= f_left):
            j = rng.randint(max(0, len(live) - window), len(live) - 1)
            out.append(Free(live.pop(j)))
            f_left -= 1
        elif a_left:
            _, lo, hi = _SIZE_BUCKETS[rng.weighted_index(weights)]
            ident = f"s{allocs - a_left}"
            out.append(Malloc(rng.randint(lo, hi), ident))
            live.append(ident)
            a_left -= 1
        else:
            raise ValueError("more frees than allocations can support")
    return StartingState.from_directives(name, out)


def canonicalize_ids(directives):
    """Rename ids to s0, s1, ... in definition order (keeps h<n> free for candidates)."""
    names, out, n = {}, [], 0
    for d in directives:
        t = type(d)
        if t is Free:
            out.append(Free(names.pop(d.id)))
            continue
        if t is Realloc:
            old = names.pop(d.old_id)
        new = f"s{n}"
        n += 1
        names[d.id] = new
        if t is Malloc:
            out.append(Malloc(d.size, new))
        elif t is Calloc:
            out.append(Calloc(d.nmemb, d.size, new))
        elif t is Realloc:
            out.append(Realloc(old, d.size, new))
        else:
            raise ValueError("starting states may not contain fst/snd markers")
    return tuple(out)


def load_state(path_or_name) -> StartingState:
    """A shipped synthetic state by name, or a directive trace file."""
    if path_or_name in STATE_NAMES:
        text = resources.files("heapsieve.data.states").joinpath(f"{path_or_name}.trace").read_text()
        name = path_or_name
    else:
        path = Path(path_or_name)
        text = path.read_text()
        name = path.stem
    prog = parse_directives(text, require_markers=False)
    if prog.has_markers:
        raise ValueError("starting states may not contain fst/snd markers")
    return StartingState.from_directives(name, canonicalize_ids(prog.directives))


def state_trace(state: StartingState) -> str:
    return serialize(DriverProgram(state.directives))


# -- experiments -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    profile: str
    state: str
    src_size: int
    dst_size: int
    direction: Direction
    order: Order
    noise: int = 0

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "order", Order(self.order))

    @property
    def relationship(self) -> Relationship:
        return classify_relationship(self.order, self.direction)

    @property
    def first_size(self):
        return self.src_size if self.order is Order.SRC_FIRST else self.dst_size

    @property
    def second_size(self):
        return self.dst_size if self.order is Order.SRC_FIRST else self.src_size

    @property
    def key(self):
        return "|".join(
            map(str, (self.profile, self.state, self.src_size, self.dst_size, self.direction.value, self.order.value, self.noise))
        )

    def to_dict(self):
        d = asdict(self)
        d["direction"] = self.direction.value
        d["order"] = self.order.value
        d["relationship"] = self.relationship.value
        return d


def generate_grid(sizes=GRID_SIZES, noises=GRID_NOISES, profiles=("avrlibc-like", "dlmalloc-like", "tcmalloc-like"), states=STATE_NAMES):
    """Every size pair with both orders and both directions.

    For x != y (unordered) the four order/direction combinations are
    distinct problems; for x == y the two orders coincide, leaving the two
    directions. Six sizes give 15*4 + 6*2 = 72 experiments per
    (profile, state, noise).
    """
    sizes = sorted(set(sizes))
    cells = []
    for i, x in enumerate(sizes):
        for y in sizes[i:]:
            orders = (Order.SRC_FIRST,) if x == y else (Order.SRC_FIRST, Order.DST_FIRST)
            for order in orders:
                for direction in (Direction.OVERFLOW, Direction.UNDERFLOW):
                    cells.append((x, y, direction, order))
    return [
        ExperimentSpec(p, s, x, y, direction, order, n)
        for p in profiles
        for s in states
        for n in noises
        for x, y, direction, order in cells
    ]


def target_distance(spec: ExperimentSpec, config: AllocatorConfig) -> int:
    """Signed fst - snd distance that makes the two buffers adjacent.

    fst is the first-allocated buffer. If it must sit below the other one the
    target is minus its footprint, else plus the second buffer's footprint.
    """
    src_below = spec.direction is Direction.OVERFLOW
    first_below = src_below if spec.order is Order.SRC_FIRST else not src_below
    if first_below:
        return -size_class_of(config, spec.first_size).size
    return size_class_of(config, spec.second_size).size


def experiment_pool(spec: ExperimentSpec, state: StartingState) -> SequencePool:
    """One noise-free alloc and free sequence per size; noise wraps fst/snd.

    ``noise`` allocations of the source size are split around each buffer
    of interest: a prefix of ceil(noise / 2) and a suffix of the rest.
    """
    after = spec.noise // 2
    before = spec.noise - after
    noise_size = spec.src_size if spec.noise else None
    sizes = sorted({spec.src_size, spec.dst_size})
    return SequencePool(
        alloc={s: (InteractionSequence("alloc", s),) for s in sizes},
        free={s: (InteractionSequence("free", s),) for s in sizes},
        fst=InteractionSequence("fst", spec.first_size, before, after, noise_size),
        snd=InteractionSequence("snd", spec.second_size, before, after, noise_size),
        starting_state=state.directives,
    )


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    solved: bool
    target: int
    final_distance: int | None
    initial_distance: int | None
    candidates_to_best: int | None
    time_to_best: float | None
    candidates_tried: int
    seed: int
    run: int = 0
    elapsed: float = field(default=0.0, compare=False)

    @property
    def relationship(self):
        return self.spec.relationship

    def to_dict(self):
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        spec = dict(d.pop("spec"))
        spec.pop("relationship", None)
        return cls(spec=ExperimentSpec(**spec), **d)


def experiment_seed(master_seed, spec: ExperimentSpec, run=0):
    return derive_seed(master_seed + run, zlib.crc32(spec.key.encode()))


@lru_cache(maxsize=16)
def _config(name):
    return profile(name)


@lru_cache(maxsize=16)
def _state(name):
    return load_state(name)


@lru_cache(maxsize=8)
def _executor(profile_name, state_name):
    return SimulatedExecutor(_config(profile_name), _state(state_name).directives)


def initial_distance(spec, config, state):
    pool = experiment_pool(spec, state)
    from .search import _Builder

    b = _Builder()
    b.emit(pool.fst)
    b.emit(pool.snd)
    try:
        return execute(DriverProgram(state.directives + tuple(b.body)), config).distance
    except Exception:
        return None


def run_experiment(spec: ExperimentSpec, g=50_000, m=1000, r=98, master_seed=0, run=0, workers=1, executor=None, state=None, config=None) -> ExperimentResult:
    config = config or _config(spec.profile)
    state = state or _state(spec.state)
    if executor is None:
        executor = _executor(spec.profile, spec.state) if config is _config(spec.profile) else SimulatedExecutor(config, state.directives)
    d = target_distance(spec, config)
    seed = experiment_seed(master_seed, spec, run)
    pool = experiment_pool(spec, state)
    t0 = time.perf_counter()
    out = search(pool, SearchParams(g=g, d=d, m=m, r=r, seed=seed), executor, workers=workers)
    return ExperimentResult(
        spec=spec,
        solved=out.solved,
        target=d,
        final_distance=out.best_distance,
        initial_distance=initial_distance(spec, config, state),
        candidates_to_best=out.candidates_to_best,
        time_to_best=None if out.time_to_best is None else round(out.time_to_best, 6),
        candidates_tried=out.candidates_tried,
        seed=seed,
        run=run,
        elapsed=time.perf_counter() - t0,
    )


# -- aggregation -------------------------------------------------------------------

CSV_HEADER = ("allocator", "start_state", "noise", "pct_overall", "pct_natural", "pct_reversed", "n_natural", "n_reversed", "partial")


def pct(solved, total):
    """Integer percentage, halves rounded up."""
    return None if total == 0 else math.floor(100 * solved / total + 0.5)


@dataclass(frozen=True)
class AggregateRow:
    allocator: str
    start_state: str
    noise: int
    pct_overall: int | None
    pct_natural: int | None
    pct_reversed: int | None
    n_natural: int
    n_reversed: int
    partial: bool

    def as_tuple(self):
        return tuple(getattr(self, c) for c in CSV_HEADER)


def _row(allocator, state, noise, results, expected):
    nat = [r.solved for r in results if r.relationship is Relationship.NATURAL]
    rev = [r.solved for r in results if r.relationship is Relationship.REVERSED]
    partial = not nat or not rev or len(nat) != len(rev)
    if expected is not None:
        partial = partial or len(nat) != expected or len(rev) != expected
    return AggregateRow(
        allocator, state, noise,
        pct(sum(nat) + sum(rev), len(nat) + len(rev)),
        pct(sum(nat), len(nat)),
        pct(sum(rev), len(rev)),
        len(nat), len(rev), partial,
    )


def aggregate(results, per_class=None):
    """Rows per (profile, state, noise) plus state-averaged rows.

    ``per_class`` is the expected number of natural (and of reversed) results
    per row; rows that fall short are flagged partial. Averaged rows pool
    every result of a (profile, noise) across states.
    """
    groups = {}
    for res in results:
        s = res.spec
        groups.setdefault((s.profile, s.state, s.noise), []).append(res)
    rows = [_row(p, st, n, rs, per_class) for (p, st, n), rs in sorted(groups.items())]
    pooled = {}
    for (p, st, n), rs in groups.items():
        pooled.setdefault((p, n), []).append((st, rs))
    for (p, n), parts in sorted(pooled.items()):
        if len(parts) < 2:
            continue
        allres = [r for _, rs in parts for r in rs]
        exp = None if per_class is None else per_class * len(parts)
        rows.append(_row(p, "averaged", n, allres, exp))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(["" if v is None else (int(v) if isinstance(v, bool) else v) for v in row.as_tuple()])
    return buf.getvalue()
