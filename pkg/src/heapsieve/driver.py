"""Directive programs: parsing, canonical serialization and execution.

A program is a list of angle-bracket directives, one per line::

    <malloc 32 a>
    <calloc 4 8 b>
    <free a>
    <realloc b 64 c>
    <fst 16>
    <snd 16>

Executing it against a heap reports ``addr(fst) - addr(snd)``.

Two annotation lines extend the format for template-generated programs.
They start with ``#`` so drivers that only know the six directives skip
them as comments::

    #@record x          the next allocating directive's address is named x
    #@require x y -64   success requires addr(x) - addr(y) == -64
"""

from __future__ import annotations

import os
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

from .alloc_model import MAPPED_BASE, AllocatorConfig, HeapError, new_heap


class Malloc(NamedTuple):
    size: int
    id: str


class Calloc(NamedTuple):
    nmemb: int
    size: int
    id: str


class Free(NamedTuple):
    id: str


class Realloc(NamedTuple):
    old_id: str
    size: int
    id: str


class Fst(NamedTuple):
    size: int


class Snd(NamedTuple):
    size: int


Directive = Malloc | Calloc | Free | Realloc | Fst | Snd
ALLOCATING = (Malloc, Calloc, Realloc, Fst, Snd)

_KEYWORDS = {Malloc: "malloc", Calloc: "calloc", Free: "free", Realloc: "realloc", Fst: "fst", Snd: "snd"}


def format_directive(d) -> str:
    return "<" + " ".join([_KEYWORDS[type(d)], *map(str, d)]) + ">"


class Check(NamedTuple):
    x: str
    y: str
    distance: int


@dataclass(frozen=True)
class DriverProgram:
    directives: tuple
    # record name -> index of the allocating directive it captures
    records: tuple = ()
    checks: tuple = ()

    def __len__(self):
        return len(self.directives)

    @property
    def has_markers(self):
        return any(type(d) is Fst for d in self.directives)

    def id_table(self):
        """Map each id to the index of the directive that last defined it."""
        table = {}
        for i, d in enumerate(self.directives):
            t = type(d)
            if t is Malloc or t is Calloc or t is Realloc:
                table[d.id] = i
        return table


class ParseError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{msg}, line {line}" for line, msg in self.errors))


class ExecutionError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"directive {index}: {cause}")
        self.index = index
        self.cause = cause


class DriverProtocolError(RuntimeError):
    pass


_ID_RE = re.compile(r"[^\s<>]+\Z")


def _int(tok):
    if not re.fullmatch(r"[0-9]+", tok):
        raise ValueError(f"bad integer {tok!r}")
    return int(tok)


def _parse_line(body):
    toks = body.split()
    if not toks:
        raise ValueError("empty directive")
    op, args = toks[0], toks[1:]
    arity = {"malloc": 2, "calloc": 3, "free": 1, "realloc": 3, "fst": 1, "snd": 1}
    if op not in arity:
        raise ValueError(f"unknown directive {op!r}")
    if len(args) != arity[op]:
        raise ValueError(f"{op} takes {arity[op]} arguments, got {len(args)}")
    for tok in args:
        if "<" in tok or ">" in tok:
            raise ValueError(f"bad token {tok!r}")
    if op == "malloc":
        return Malloc(_int(args[0]), args[1])
    if op == "calloc":
        return Calloc(_int(args[0]), _int(args[1]), args[2])
    if op == "free":
        return Free(args[0])
    if op == "realloc":
        return Realloc(args[0], _int(args[1]), args[2])
    if op == "fst":
        return Fst(_int(args[0]))
    return Snd(_int(args[0]))


def parse_directives(text: str, require_markers: bool = True) -> DriverProgram:
    directives, lines, errors = [], [], []
    records, pending_records, checks = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#@"):
            toks = line[2:].split()
            try:
                if toks[:1] == ["record"] and len(toks) == 2:
                    pending_records.append((toks[1], lineno))
                elif toks[:1] == ["require"] and len(toks) == 4:
                    checks.append((Check(toks[1], toks[2], int(toks[3])), lineno))
                else:
                    raise ValueError
            except ValueError:
                errors.append((lineno, "malformed annotation"))
            continue
        if line.startswith("#"):
            continue
        if not (line.startswith("<") and line.endswith(">")):
            errors.append((lineno, "malformed line"))
            continue
        try:
            d = _parse_line(line[1:-1])
        except ValueError as exc:
            errors.append((lineno, f"malformed line ({exc})"))
            continue
        if pending_records:
            if type(d) is Free:
                errors.append((lineno, "record annotation before a non-allocating directive"))
            for name, _ in pending_records:
                records.append((name, len(directives)))
            pending_records = []
        directives.append(d)
        lines.append(lineno)
    for name, lineno in pending_records:
        errors.append((lineno, f"record {name} captures no allocation"))
    errors += _validate(directives, lines, require_markers)
    names = {}
    for name, idx in records:
        if name in names:
            errors.append((lines[idx], f"duplicate record {name}"))
        names[name] = idx
    for chk, lineno in checks:
        for ref in (chk.x, chk.y):
            if ref not in names:
                errors.append((lineno, f"undefined record {ref}"))
    if errors:
        errors.sort()
        raise ParseError(errors)
    return DriverProgram(tuple(directives), tuple(records), tuple(c for c, _ in checks))


def _validate(directives, lines, require_markers):
    errors = []
    live = set()
    n_fst = n_snd = 0
    for d, lineno in zip(directives, lines):
        t = type(d)
        if t is Free:
            if d.id not in live:
                errors.append((lineno, "unknown id"))
            live.discard(d.id)
            continue
        if t is Realloc:
            if d.old_id not in live:
                errors.append((lineno, "unknown id"))
            live.discard(d.old_id)
        if t is Fst:
            n_fst += 1
            if n_snd:
                errors.append((lineno, "fst after snd"))
        elif t is Snd:
            n_snd += 1
            if not n_fst:
                errors.append((lineno, "snd before fst"))
        if t is Calloc and (d.nmemb < 1 or d.size < 1):
            errors.append((lineno, "sizes must be >= 1"))
        elif t is not Calloc and d.size < 1:
            errors.append((lineno, "size must be >= 1"))
        if t is Malloc or t is Calloc or t is Realloc:
            if not _ID_RE.match(d.id):
                errors.append((lineno, "bad id"))
            if d.id in live:
                errors.append((lineno, f"id {d.id} redefined while live"))
            live.add(d.id)
    if n_fst > 1:
        errors.append((lines[-1], "duplicate fst"))
    if n_snd > 1:
        errors.append((lines[-1], "duplicate snd"))
    if require_markers and (n_fst == 0 or n_snd == 0):
        errors.append((lines[-1] if lines else 0, "missing fst/snd"))
    return errors


def serialize(program: DriverProgram) -> str:
    """Canonical text: single spaces, one directive per line, '\\n' terminated."""
    at = {}
    for name, idx in program.records:
        at.setdefault(idx, []).append(name)
    out = []
    for i, d in enumerate(program.directives):
        for name in at.get(i, ()):
            out.append(f"#@record {name}\n")
        out.append(format_directive(d) + "\n")
    for c in program.checks:
        out.append(f"#@require {c.x} {c.y} {c.distance}\n")
    return "".join(out)


# -- execution ----------------------------------------------------------------


@dataclass
class DriverResult:
    addr_fst: int | None = None
    addr_snd: int | None = None
    distance: int | None = None
    failure: str | None = None
    snapshot: list = field(default_factory=list, repr=False)
    # (x, y, observed distance, required distance) per check
    checks: list = field(default_factory=list)

    @property
    def checks_pass(self):
        return bool(self.checks) and all(obs == req for _, _, obs, req in self.checks)


def run_directives(heap, directives, ids=None, start=0):
    """Apply directives to ``heap``; returns (addr_fst, addr_snd, addresses).

    ``addresses[i]`` is the address returned by allocating directive ``i``.
    """
    ids = {} if ids is None else ids
    addr_fst = addr_snd = None
    addresses = {}
    i = start
    try:
        for i, d in enumerate(directives, start):
            t = type(d)
            if t is Malloc:
                a = ids[d.id] = heap.alloc(d.size, d.id)
            elif t is Free:
                heap.free(ids.pop(d.id))
                continue
            elif t is Calloc:
                a = ids[d.id] = heap.calloc(d.nmemb, d.size, d.id)
            elif t is Realloc:
                a = heap.realloc(ids.pop(d.old_id), d.size, d.id)
                ids[d.id] = a
            elif t is Fst:
                a = addr_fst = heap.alloc(d.size, "fst")
            else:
                a = addr_snd = heap.alloc(d.size, "snd")
            addresses[i] = a
    except (HeapError, KeyError, ValueError) as exc:
        raise ExecutionError(i, exc) from exc
    return addr_fst, addr_snd, addresses


def execute(program: DriverProgram, config: AllocatorConfig, heap=None, snapshot=True) -> DriverResult:
    """Run ``program`` on a fresh heap (or on ``heap``, which is mutated)."""
    heap = new_heap(config) if heap is None else heap
    addr_fst, addr_snd, addresses = run_directives(heap, program.directives)
    result = DriverResult(addr_fst, addr_snd, snapshot=heap.snapshot() if snapshot else [])
    if addr_fst is not None and addr_snd is not None:
        result.distance = addr_fst - addr_snd
        if (addr_fst >= MAPPED_BASE) != (addr_snd >= MAPPED_BASE):
            result.failure = "cross-region: fst and snd live in different regions"
    named = {name: addresses[idx] for name, idx in program.records}
    for c in program.checks:
        result.checks.append((c.x, c.y, named[c.x] - named[c.y], c.distance))
    return result


# -- external drivers ---------------------------------------------------------

DEFAULT_TIMEOUT = 10.0


def parse_driver_output(stdout: str) -> DriverResult:
    lines = stdout.splitlines()
    if not lines:
        raise DriverProtocolError("driver produced no output")
    result = DriverResult()
    try:
        first = lines[0].strip()
        if first != "NA":
            result.distance = int(first)
        for line in lines[1:]:
            toks = line.split()
            if toks and toks[0] == "CHECK":
                _, x, y, obs, req = toks
                result.checks.append((x, y, int(obs), int(req)))
    except ValueError as exc:
        raise DriverProtocolError(f"unparsable driver output: {lines[0]!r}") from exc
    return result


def run_external(driver_path, program: DriverProgram, timeout: float = DEFAULT_TIMEOUT) -> DriverResult:
    """Run an external driver executable on ``program``.

    The program is written to a temporary file whose path is the driver's only
    argument; line 1 of stdout is the signed distance.
    """
    fd, path = tempfile.mkstemp(suffix=".trace", prefix="heapsieve-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(serialize(program))
        try:
            proc = subprocess.run(
                [os.fspath(driver_path), path], capture_output=True, text=True, timeout=timeout
            )
        except subprocess.TimeoutExpired as exc:
            raise DriverProtocolError(f"driver timed out after {timeout} s") from exc
        except OSError as exc:
            raise DriverProtocolError(f"cannot run driver: {exc}") from exc
    finally:
        os.unlink(path)
    if proc.returncode != 0:
        raise DriverProtocolError(f"driver exited {proc.returncode}: {proc.stderr.strip()}")
    return parse_driver_output(proc.stdout)
