"""Pseudo-random black-box search for a target allocation distance.

Each candidate is the starting-state prefix followed by ``len`` interaction
sequences, one of which allocates the first buffer of interest; the second
buffer's sequence is appended last. Candidate ``i`` is generated from its own
SplitMix64 stream (``derive_seed(seed, i)``), so results do not depend on the
order or process in which candidates are evaluated.

Draw order inside a candidate (mirrored by the compiled engine)::

    len      = randint(1, m)
    fst_slot = randint(0, len - 1)
    per other slot:
        randint(1, 100) <= r  -> alloc:  size index*, sequence index*
        otherwise             -> free:   size index*, then free_fallback
    free_fallback: live target index (if any live), sequence index*

Draws marked * are skipped when there is only one option.
"""

from __future__ import annotations

import enum
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from .driver import DriverProgram, Fst, Free, Malloc, Snd, run_directives, run_external
from .alloc_model import new_heap
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

CANDIDATE_ID = "h{}"


class Order(str, enum.Enum):
    SRC_FIRST = "src-first"
    DST_FIRST = "dst-first"


class Direction(str, enum.Enum):
    OVERFLOW = "overflow"
    UNDERFLOW = "underflow"


class Relationship(str, enum.Enum):
    NATURAL = "natural"
    REVERSED = "reversed"


def classify_relationship(order, direction) -> Relationship:
    order, direction = Order(order), Direction(direction)
    natural = (order is Order.SRC_FIRST) == (direction is Direction.OVERFLOW)
    return Relationship.NATURAL if natural else Relationship.REVERSED


@dataclass(frozen=True)
class InteractionSequence:
    """One API call's worth of allocator interactions.

    ``kind`` is "alloc", "free", "fst" or "snd". Noise allocations of
    ``noise_size`` bytes are issued before and after the primary interaction;
    they are never freed by the search.
    """

    kind: str
    primary_size: int
    noise_before: int = 0
    noise_after: int = 0
    noise_size: int | None = None
    target: str | None = None  # id freed by a bound "free" sequence

    def __post_init__(self):
        if self.kind not in ("alloc", "free", "fst", "snd"):
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        if self.primary_size < 1 or self.noise_before < 0 or self.noise_after < 0:
            raise ValueError("sizes must be >= 1 and noise counts >= 0")
        if self.noise_count and (self.noise_size is None or self.noise_size < 1):
            raise ValueError("noisy sequences need a noise_size >= 1")

    @property
    def noise_count(self):
        return self.noise_before + self.noise_after


@dataclass(frozen=True)
class SequencePool:
    alloc: dict  # size -> tuple of "alloc" sequences
    free: dict  # size -> tuple of "free" sequences
    fst: InteractionSequence
    snd: InteractionSequence
    starting_state: tuple = ()

    def __post_init__(self):
        if set(self.alloc) != set(self.free) or not self.alloc:
            raise ValueError("every offered size needs alloc and free sequences")
        for size in self.alloc:
            if not self.alloc[size] or not self.free[size]:
                raise ValueError(f"size {size} lacks an alloc or free sequence")
            for s in self.alloc[size]:
                if s.kind != "alloc" or s.primary_size != size:
                    raise ValueError(f"bad alloc sequence for size {size}: {s}")
            for s in self.free[size]:
                if s.kind != "free" or s.primary_size != size:
                    raise ValueError(f"bad free sequence for size {size}: {s}")
        if self.fst.kind != "fst" or self.snd.kind != "snd":
            raise ValueError("fst/snd sequences have the wrong kind")
        object.__setattr__(self, "alloc", {k: tuple(v) for k, v in sorted(self.alloc.items())})
        object.__setattr__(self, "free", {k: tuple(v) for k, v in sorted(self.free.items())})
        object.__setattr__(self, "starting_state", tuple(self.starting_state))
        clash = [d for d in self.starting_state if getattr(d, "id", "").startswith("h")]
        if any(d.id[1:].isdigit() for d in clash):
            raise ValueError("starting state ids of the form h<digits> are reserved")

    @property
    def sizes(self):
        return tuple(self.alloc)

    @classmethod
    def simple(cls, sizes, fst_size, snd_size, starting_state=(), fst_noise=(0, 0), snd_noise=(0, 0), noise_size=None):
        """One noise-free alloc and free sequence per size."""
        sizes = sorted(set(sizes))
        return cls(
            alloc={s: (InteractionSequence("alloc", s),) for s in sizes},
            free={s: (InteractionSequence("free", s),) for s in sizes},
            fst=InteractionSequence("fst", fst_size, *fst_noise, noise_size=noise_size if any(fst_noise) else None),
            snd=InteractionSequence("snd", snd_size, *snd_noise, noise_size=noise_size if any(snd_noise) else None),
            starting_state=starting_state,
        )


@dataclass(frozen=True)
class SearchParams:
    g: int = 50_000
    d: int = 0
    m: int = 1000
    r: int = 98
    seed: int = 0

    def __post_init__(self):
        if self.g < 1 or self.m < 1 or not 0 <= self.r <= 100:
            raise ValueError("need g >= 1, m >= 1 and 0 <= r <= 100")


@dataclass
class Candidate:
    prefix: tuple
    body: list
    fst_index: int
    length: int
    index: int | None = None

    @property
    def program(self) -> DriverProgram:
        return DriverProgram(tuple(self.prefix) + tuple(self.body))

    @property
    def slots(self):
        return self.length + 1


@dataclass
class SearchOutcome:
    solved: bool
    candidate: Candidate | None
    candidates_tried: int
    best_distance: int | None
    best_candidate: Candidate | None
    best_index: int | None
    elapsed: float
    time_to_best: float | None = None
    failures: int = 0
    target: int = 0

    @property
    def candidates_to_best(self):
        return None if self.best_index is None else self.best_index + 1


# -- candidate construction -----------------------------------------------------


class _Builder:
    def __init__(self):
        self.body = []
        self.counter = 0

    def new_id(self):
        ident = CANDIDATE_ID.format(self.counter)
        self.counter += 1
        return ident

    def noise(self, seq, count):
        for _ in range(count):
            self.body.append(Malloc(seq.noise_size, self.new_id()))

    def emit(self, seq):
        """Append ``seq``; returns the id of its primary allocation, if any."""
        self.noise(seq, seq.noise_before)
        ident = None
        if seq.kind == "alloc":
            ident = self.new_id()
            self.body.append(Malloc(seq.primary_size, ident))
        elif seq.kind == "free":
            self.body.append(Free(seq.target))
        elif seq.kind == "fst":
            self.body.append(Fst(seq.primary_size))
        else:
            self.body.append(Snd(seq.primary_size))
        self.noise(seq, seq.noise_after)
        return ident


def _pick(rng, options):
    return options[0] if len(options) == 1 else options[rng.randint(0, len(options) - 1)]


def free_fallback(pool: SequencePool, live_set: dict, size: int, rng) -> InteractionSequence:
    """A free sequence bound to a random live allocation of ``size``.

    Falls back to an alloc sequence of the same size when nothing of that
    size is live. The chosen target is removed from ``live_set``.
    """
    live = live_set.get(size)
    if not live:
        return _pick(rng, pool.alloc[size])
    j = rng.randint(0, len(live) - 1)
    live[j], live[-1] = live[-1], live[j]
    target = live.pop()
    return replace(_pick(rng, pool.free[size]), target=target)


def construct_candidate(pool: SequencePool, params: SearchParams, rng) -> Candidate:
    sizes = pool.sizes
    b = _Builder()
    live = {s: [] for s in sizes}
    n = rng.randint(1, params.m)
    fst_slot = rng.randint(0, n - 1)
    for i in range(n):
        if i == fst_slot:
            b.emit(pool.fst)
            continue
        if rng.randint(1, 100) <= params.r:
            size = _pick(rng, sizes)
            seq = _pick(rng, pool.alloc[size])
        else:
            size = _pick(rng, sizes)
            seq = free_fallback(pool, live, size, rng)
        ident = b.emit(seq)
        if ident is not None:
            live[size].append(ident)
    b.emit(pool.snd)
    return Candidate(pool.starting_state, b.body, fst_slot, n)


def candidate_at(pool, params, index) -> Candidate:
    cand = construct_candidate(pool, params, SplitMix64(derive_seed(params.seed, index)))
    cand.index = index
    return cand


# -- executors ------------------------------------------------------------------


class SimulatedExecutor:
    """Runs candidates on the reference heap model.

    The starting-state prefix is executed once; each candidate starts from a
    copy of that heap.
    """

    def __init__(self, config, prefix=(), use_engine=True):
        self.config = config
        self.prefix = tuple(prefix)
        self.use_engine = use_engine
        self._base = new_heap(config)
        self._base_ids = {}
        run_directives(self._base, self.prefix, self._base_ids)
        self._engine = None

    def __call__(self, cand: Candidate) -> int:
        if cand.prefix is self.prefix or tuple(cand.prefix) == self.prefix:
            heap = self._base.copy()
            ids = dict(self._base_ids)
            fst, snd, _ = run_directives(heap, cand.body, ids, start=len(self.prefix))
        else:
            fst, snd, _ = run_directives(new_heap(self.config), cand.program.directives)
        return fst - snd

    def batch(self, pool, params, start, stop):
        if self.use_engine and tuple(pool.starting_state) == self.prefix:
            from . import _engine

            if self._engine is None:
                self._engine = _engine.Engine.build(self.config, self.prefix)
            if self._engine is not None and self._engine.supports(pool):
                return self._engine.batch(pool, params, start, stop)
        return python_batch(pool, params, self, start, stop)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_engine"] = None
        return state


class ExternalExecutor:
    """Runs candidates through an external driver executable."""

    def __init__(self, driver_path, timeout=10.0):
        self.driver_path = driver_path
        self.timeout = timeout

    def __call__(self, cand: Candidate) -> int:
        res = run_external(self.driver_path, cand.program, self.timeout)
        if res.distance is None:
            raise RuntimeError("driver reported no distance")
        return res.distance


@dataclass
class ChunkResult:
    start: int
    stop: int  # exclusive; stops right after a solving index
    solved_index: int | None = None
    best_index: int | None = None
    best_distance: int | None = None
    best_error: int | None = None
    failures: int = 0


def python_batch(pool, params, executor, start, stop) -> ChunkResult:
    res = ChunkResult(start, stop)
    for i in range(start, stop):
        cand = candidate_at(pool, params, i)
        try:
            dist = executor(cand)
        except Exception as exc:  # executor failures are non-solutions
            res.failures += 1
            log.debug("candidate %d failed: %s", i, exc)
            continue
        err = abs(dist - params.d)
        if res.best_error is None or err < res.best_error:
            res.best_error, res.best_index, res.best_distance = err, i, dist
        if err == 0:
            res.solved_index = i
            res.stop = i + 1
            break
    return res


@dataclass
class ChunkSummary:
    solved_index: int | None = None
    best_index: int | None = None
    best_distance: int | None = None
    best_error: int | None = None
    failures: int = 0
    tried: int = 0
    time_to_best: float | None = None


def run_chunks(evaluate, g, chunk, workers=1) -> ChunkSummary:
    """Evaluate indices [0, g) in chunks with ``evaluate(start, stop)``.

    Chunks are combined in index order, so the first solving index and the
    best (earliest on ties) are the same for any worker count. ``evaluate``
    must be picklable when ``workers > 1``.
    """
    t0 = time.perf_counter()
    out = ChunkSummary()
    bounds = [(a, min(a + chunk, g)) for a in range(0, g, chunk)]

    def absorb(res):
        out.failures += res.failures
        out.tried = res.stop
        if res.best_index is not None and (out.best_error is None or res.best_error < out.best_error):
            out.best_index, out.best_distance, out.best_error = res.best_index, res.best_distance, res.best_error
            out.time_to_best = time.perf_counter() - t0
        if res.solved_index is not None:
            out.solved_index = res.solved_index
            return True
        return False

    if workers <= 1:
        for a, b in bounds:
            if absorb(evaluate(a, b)):
                break
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            pending = [ex.submit(evaluate, a, b) for a, b in bounds]
            for fut in pending:
                if absorb(fut.result()):
                    for f in pending:
                        f.cancel()
                    break
    return out


class _ChunkJob:
    def __init__(self, pool, params, executor):
        self.pool, self.params, self.executor = pool, params, executor

    def __call__(self, start, stop):
        batch = getattr(self.executor, "batch", None)
        if batch is not None:
            return batch(self.pool, self.params, start, stop)
        return python_batch(self.pool, self.params, self.executor, start, stop)


def default_workers(requested=1):
    """Worker count; the HEAPSIEVE_WORKERS environment variable wins."""
    env = os.environ.get("HEAPSIEVE_WORKERS")
    return max(1, int(env)) if env else max(1, requested)


def search(pool: SequencePool, params: SearchParams, executor, workers: int = 1, chunk: int | None = None) -> SearchOutcome:
    """Generate up to ``params.g`` candidates; stop at the first exact hit.

    Serial and parallel runs return the same solving index and best distance.
    """
    t0 = time.perf_counter()
    if chunk is None:
        chunk = 2000 if getattr(executor, "batch", None) is not None else 200
    s = run_chunks(_ChunkJob(pool, params, executor), params.g, chunk, workers)
    best_cand = candidate_at(pool, params, s.best_index) if s.best_index is not None else None
    solved = s.solved_index is not None
    return SearchOutcome(
        solved=solved,
        candidate=best_cand if solved else None,
        candidates_tried=s.tried,
        best_distance=s.best_distance,
        best_candidate=best_cand,
        best_index=s.best_index,
        elapsed=time.perf_counter() - t0,
        time_to_best=s.time_to_best,
        failures=s.failures,
        target=params.d,
    )
