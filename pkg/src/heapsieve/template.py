"""Template-driven candidate construction over a fragment database.

A template is a directive program with ``#X-SHRIKE`` lines::

    #X-SHRIKE <HEAP-MANIP 32 64>          insert 1..m fragments of these sizes
    #X-SHRIKE <RECORD-ALLOC 0 x>          name the next allocation x
    #X-SHRIKE <REQUIRE-DISTANCE x y -32>  solved iff addr(x) - addr(y) == -32

Fragments are small directive files. An allocating fragment's primary size
is given by a ``#@primary N`` line or defaults to its first allocation. A
freeing fragment uses the placeholder id ``@N``: ``<free @64>`` frees a live
primary allocation of 64 bytes made by an earlier fragment of the same
candidate.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

from .alloc_model import profile as load_profile
from .driver import (
    ALLOCATING,
    Calloc,
    Check,
    DriverProgram,
    Free,
    Fst,
    Malloc,
    ParseError,
    Realloc,
    Snd,
    _parse_line,
    execute,
    run_external,
    serialize,
)
from .rng import SplitMix64, derive_seed
from .search import ChunkResult, SearchOutcome, run_chunks

INDEX_FILE = "index.json"
FRAGMENT_SUFFIX = ".frag"


class Verbatim(NamedTuple):
    text: str


class HeapManip(NamedTuple):
    sizes: tuple | None


class RecordAlloc(NamedTuple):
    offset: int
    id: str


class RequireDistance(NamedTuple):
    x: str
    y: str
    dist: int


@dataclass(frozen=True)
class Template:
    nodes: tuple
    source: str = ""

    @property
    def checks(self):
        return [n for n in self.nodes if type(n) is RequireDistance]

    @property
    def manip_sizes(self):
        out = set()
        for n in self.nodes:
            if type(n) is HeapManip and n.sizes:
                out.update(n.sizes)
        return out


class TemplateError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{msg}, line {line}" for line, msg in self.errors))


_SHRIKE = re.compile(r"#X-SHRIKE\s+<(.*)>\s*\Z")


def parse_template(text: str) -> Template:
    nodes, errors = [], []
    recorded = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line.startswith("#X-SHRIKE"):
            nodes.append(Verbatim(raw))
            if line and not line.startswith("#"):
                try:
                    if not (line.startswith("<") and line.endswith(">")):
                        raise ValueError("not a directive")
                    _parse_line(line[1:-1])
                except ValueError as exc:
                    errors.append((lineno, f"malformed line ({exc})"))
            continue
        m = _SHRIKE.match(line)
        toks = m.group(1).split() if m else []
        if not toks:
            errors.append((lineno, "malformed #X-SHRIKE line"))
            continue
        op, args = toks[0], toks[1:]
        try:
            if op == "HEAP-MANIP":
                sizes = tuple(int(a) for a in args)
                if any(s < 1 for s in sizes):
                    raise ValueError
                nodes.append(HeapManip(sizes or None))
            elif op == "RECORD-ALLOC":
                if len(args) != 2:
                    raise ValueError
                off = int(args[0])
                if off < 0:
                    raise ValueError
                if args[1] in recorded:
                    errors.append((lineno, f"id {args[1]} recorded twice"))
                recorded[args[1]] = lineno
                nodes.append(RecordAlloc(off, args[1]))
            elif op == "REQUIRE-DISTANCE":
                if len(args) != 3:
                    raise ValueError
                nodes.append(RequireDistance(args[0], args[1], int(args[2])))
            else:
                errors.append((lineno, f"unknown directive {op}"))
                continue
        except ValueError:
            what = "size list" if op == "HEAP-MANIP" else "arguments"
            errors.append((lineno, f"malformed {what} for {op}"))
            continue
        if op == "REQUIRE-DISTANCE":
            for ref in args[:2]:
                if ref not in recorded:
                    errors.append((lineno, f"undefined id {ref}"))
    if not any(type(n) is RequireDistance for n in nodes):
        errors.append((0, "template needs a REQUIRE-DISTANCE directive"))
    if errors:
        raise TemplateError(sorted(errors))
    return Template(tuple(nodes), text)


# -- fragments -----------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionSummary:
    sizes: dict  # request size -> count
    frees_triggered: bool
    noise_count: int
    primary_size: int | None = None
    kind: str = "alloc"  # "alloc" | "free"

    def to_dict(self):
        d = asdict(self)
        d["sizes"] = {str(k): v for k, v in sorted(self.sizes.items())}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sizes"] = {int(k): v for k, v in d["sizes"].items()}
        return cls(**d)


@dataclass(frozen=True)
class Fragment:
    name: str
    directives: tuple
    summary: InteractionSummary | None = None
    text: str = ""
    declared_primary: int | None = None

    def free_target_size(self):
        for d in self.directives:
            if type(d) is Free and d.id.startswith("@"):
                return int(d.id[1:])
        return None


_PLACEHOLDER = re.compile(r"@([0-9]+)\Z")


def parse_fragment(name, text) -> Fragment:
    """Parse a fragment file; ``@N`` ids are free placeholders."""
    directives, primary = [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("#@primary"):
            primary = int(line.split()[1])
            continue
        if not line or line.startswith("#"):
            continue
        if not (line.startswith("<") and line.endswith(">")):
            raise ParseError([(lineno, "malformed line")])
        try:
            d = _parse_line(line[1:-1])
        except ValueError as exc:
            raise ParseError([(lineno, f"malformed line ({exc})")]) from exc
        if type(d) in (Fst, Snd):
            raise ParseError([(lineno, "fragments may not contain fst/snd")])
        directives.append(d)
    frag = Fragment(name, tuple(directives), text=text, declared_primary=primary)
    _check_fragment(frag)
    return frag


def _check_fragment(frag):
    live = set()
    for d in frag.directives:
        t = type(d)
        if t is Free:
            if _PLACEHOLDER.match(d.id):
                continue
            if d.id not in live:
                raise ParseError([(0, f"fragment {frag.name}: unknown id {d.id}")])
            live.discard(d.id)
        elif t is Realloc:
            if d.old_id not in live:
                raise ParseError([(0, f"fragment {frag.name}: unknown id {d.old_id}")])
            live.discard(d.old_id)
            live.add(d.id)
        else:
            live.add(d.id)


def _request(d):
    return d.nmemb * d.size if type(d) is Calloc else d.size


def summarize_fragment(fragment: Fragment, config=None) -> InteractionSummary:
    """Execute ``fragment`` on a fresh arena and tally what it asked for.

    Placeholder frees get a prelude allocation of the named size so the
    fragment can run; the prelude is not counted.
    """
    config = config or load_profile("ideal")
    prelude, body = [], []
    targets = {}
    for d in fragment.directives:
        if type(d) is Free and _PLACEHOLDER.match(d.id):
            size = int(d.id[1:])
            ident = f"prelude{len(prelude)}"
            prelude.append(Malloc(size, ident))
            body.append(Free(ident))
            targets.setdefault(size, 0)
            targets[size] += 1
        else:
            body.append(d)
    # run for validation; allocator errors propagate
    execute(DriverProgram(tuple(prelude + body)), config)
    sizes = Counter(_request(d) for d in fragment.directives if type(d) in (Malloc, Calloc, Realloc))
    frees = any(type(d) in (Free, Realloc) for d in fragment.directives)
    if targets:
        primary, kind = next(iter(targets)), "free"
        noise = sum(sizes.values())
    else:
        kind = "alloc"
        primary = fragment.declared_primary
        if primary is None:
            first = next((d for d in fragment.directives if type(d) in (Malloc, Calloc, Realloc)), None)
            primary = None if first is None else _request(first)
        noise = sum(sizes.values()) - (1 if primary in sizes else 0)
    return InteractionSummary(dict(sizes), frees, noise, primary, kind)


@dataclass
class FragmentDB:
    fragments: list = field(default_factory=list)

    def __post_init__(self):
        self.by_kind = {"alloc": [], "free": []}
        for f in self.fragments:
            if f.summary is not None and f.summary.primary_size is not None:
                self.by_kind[f.summary.kind].append(f)

    def sizes(self, kind="alloc"):
        return sorted({f.summary.primary_size for f in self.by_kind[kind]})

    def eligible(self, kind, sizes):
        frags = self.by_kind[kind]
        if sizes:
            frags = [f for f in frags if f.summary.primary_size in sizes]
        return frags

    @classmethod
    def from_texts(cls, items, config=None):
        frags = []
        for name, text in items:
            f = parse_fragment(name, text)
            frags.append(Fragment(f.name, f.directives, summarize_fragment(f, config), text, f.declared_primary))
        return cls(frags)


def load_fragment_db(directory, config=None, refresh=False) -> FragmentDB:
    """Load ``*.frag`` files, reusing summaries cached in ``index.json``.

    Cached entries are keyed by file content hash; stale or missing entries
    are recomputed and the index rewritten.
    """
    directory = Path(directory)
    index_path = directory / INDEX_FILE
    index = {}
    if index_path.exists() and not refresh:
        index = json.loads(index_path.read_text())
    frags, changed = [], False
    for path in sorted(directory.glob(f"*{FRAGMENT_SUFFIX}")):
        text = path.read_text()
        digest = hashlib.sha256(text.encode()).hexdigest()
        name = path.stem
        parsed = parse_fragment(name, text)
        entry = index.get(name)
        if entry and entry.get("sha256") == digest:
            summary = InteractionSummary.from_dict(entry["summary"])
        else:
            summary = summarize_fragment(parsed, config)
            index[name] = {"sha256": digest, "summary": summary.to_dict()}
            changed = True
        frags.append(Fragment(name, parsed.directives, summary, text, parsed.declared_primary))
    for stale in set(index) - {f.name for f in frags}:
        del index[stale]
        changed = True
    if changed:
        try:
            index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        except OSError:
            pass  # read-only database; summaries still computed in memory
    return FragmentDB(frags)


# -- instantiation -----------------------------------------------------------------


class MissingFragment(LookupError):
    pass


def fragment_weight(frag):
    return 1.0 / (1 + frag.summary.noise_count)


def _weighted(rng, frags):
    if len(frags) == 1:
        return frags[0]
    return frags[rng.weighted_index([fragment_weight(f) for f in frags])]


class _Writer:
    def __init__(self):
        self.directives = []
        self.records = []
        self.pending = []  # [allocations still to skip, id]
        self.nfrag = 0

    def directive(self, d):
        if type(d) in ALLOCATING and self.pending:
            idx = len(self.directives)
            keep = []
            for k, name in self.pending:
                if k == 0:
                    self.records.append((name, idx))
                else:
                    keep.append([k - 1, name])
            self.pending = keep
        self.directives.append(d)


def _emit_fragment(w, frag, bind=None):
    """Append ``frag`` with ids renamed; returns the id of its primary allocation."""
    k = w.nfrag
    w.nfrag += 1
    rename = {}
    primary_id = None
    primary = frag.summary.primary_size
    for d in frag.directives:
        t = type(d)
        if t is Free:
            if _PLACEHOLDER.match(d.id):
                w.directive(Free(bind))
            else:
                w.directive(Free(rename.pop(d.id)))
            continue
        new = f"f{k}.{d.id}"
        if t is Malloc:
            out = Malloc(d.size, new)
        elif t is Calloc:
            out = Calloc(d.nmemb, d.size, new)
        else:
            out = Realloc(rename.pop(d.old_id), d.size, new)
        rename[d.id] = new
        w.directive(out)
        if primary_id is None and frag.summary.kind == "alloc" and _request(d) == primary:
            primary_id = d.id
    if primary_id is not None and primary_id in rename:
        return rename[primary_id]
    return None


def instantiate(template: Template, db: FragmentDB, m: int, r: int, rng) -> DriverProgram:
    """One candidate program from ``template``, with its checks attached."""
    w = _Writer()
    checks = []
    live = {}  # primary size -> live fragment primary ids
    for node in template.nodes:
        t = type(node)
        if t is Verbatim:
            line = node.text.strip()
            if line and not line.startswith("#"):
                w.directive(_parse_line(line[1:-1]))
        elif t is RecordAlloc:
            w.pending.append([node.offset, node.id])
        elif t is RequireDistance:
            checks.append(Check(node.x, node.y, node.dist))
        else:
            allocs = db.eligible("alloc", node.sizes)
            if not allocs:
                raise MissingFragment(f"no fragment allocates any of {list(node.sizes or [])}")
            frees = db.eligible("free", node.sizes)
            n = rng.randint(1, m)
            for _ in range(n):
                frag, target = None, None
                if rng.randint(1, 100) > r:
                    usable = [f for f in frees if live.get(f.summary.primary_size)]
                    if usable:
                        frag = _weighted(rng, usable)
                        pool = live[frag.summary.primary_size]
                        j = rng.randint(0, len(pool) - 1)
                        pool[j], pool[-1] = pool[-1], pool[j]
                        target = pool.pop()
                if frag is None:
                    frag = _weighted(rng, allocs)
                ident = _emit_fragment(w, frag, target)
                if ident is not None:
                    live.setdefault(frag.summary.primary_size, []).append(ident)
    if w.pending:
        raise ValueError("RECORD-ALLOC offset runs past the last allocation")
    return DriverProgram(tuple(w.directives), tuple(w.records), tuple(checks))


def instantiate_text(template, db, m, r, rng):
    """Serialized candidate, with ``#@record``/``#@require`` annotation lines."""
    return serialize(instantiate(template, db, m, r, rng))


# -- search ------------------------------------------------------------------------


class TemplateSimExecutor:
    """Executes instantiated programs on the reference simulator."""

    def __init__(self, config):
        self.config = config

    def __call__(self, program):
        return execute(program, self.config, snapshot=False).checks


class TemplateExternalExecutor:
    def __init__(self, driver_path, timeout=10.0):
        self.driver_path, self.timeout = driver_path, timeout

    def __call__(self, program):
        return run_external(self.driver_path, program, self.timeout).checks


def check_error(checks):
    """Sum of |observed - required| over all checks."""
    return sum(abs(obs - req) for _, _, obs, req in checks)


class _TemplateJob:
    def __init__(self, template, db, m, r, seed, executor):
        self.template, self.db, self.m, self.r, self.seed, self.executor = template, db, m, r, seed, executor

    def program(self, i):
        return instantiate(self.template, self.db, self.m, self.r, SplitMix64(derive_seed(self.seed, i)))

    def __call__(self, start, stop):
        res = ChunkResult(start, stop)
        for i in range(start, stop):
            try:
                checks = self.executor(self.program(i))
            except MissingFragment:
                raise
            except Exception:
                res.failures += 1
                continue
            if not checks:
                res.failures += 1
                continue
            err = check_error(checks)
            if res.best_error is None or err < res.best_error:
                res.best_error, res.best_index, res.best_distance = err, i, checks[0][2]
            if err == 0:
                res.solved_index = i
                res.stop = i + 1
                break
        return res


def template_search(template, db, g=50_000, m=1000, r=98, seed=0, executor=None, config=None, workers=1, chunk=100) -> SearchOutcome:
    """Instantiate and run up to ``g`` candidates; solved when every check holds."""
    if executor is None:
        executor = TemplateSimExecutor(config or load_profile("ideal"))
    for node in template.nodes:
        if type(node) is HeapManip and not db.eligible("alloc", node.sizes):
            raise MissingFragment(f"no fragment allocates any of {list(node.sizes or [])}")
    job = _TemplateJob(template, db, m, r, seed, executor)
    t0 = time.perf_counter()
    s = run_chunks(job, g, chunk, workers)
    best = job.program(s.best_index) if s.best_index is not None else None
    solved = s.solved_index is not None
    target = template.checks[0].dist
    return SearchOutcome(
        solved=solved,
        candidate=best if solved else None,
        candidates_tried=s.tried,
        best_distance=s.best_distance,
        best_candidate=best,
        best_index=s.best_index,
        elapsed=time.perf_counter() - t0,
        time_to_best=s.time_to_best,
        failures=s.failures,
        target=target,
    )
