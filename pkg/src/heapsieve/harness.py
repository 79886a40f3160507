"""Experiment orchestration: pool configs, grid configs, resumable benches.

A bench writes into one output directory:

    manifest.json    version, config hash, seeds, timestamps
    results.jsonl    one finished experiment per line (the checkpoint)
    results.json     every record, in grid order
    results.csv      aggregate rows

Re-running a bench over the same directory skips experiments already in
``results.jsonl``; a different grid config is refused.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .alloc_model import size_class_of
from .benchgen import (
    GRID_NOISES,
    GRID_SIZES,
    STATE_NAMES,
    ExperimentResult,
    aggregate,
    experiment_seed,
    generate_grid,
    load_state,
    rows_to_csv,
    run_experiment,
)
from .search import InteractionSequence, SearchParams, SequencePool

MANIFEST = "manifest.json"
CHECKPOINT = "results.jsonl"


class ConfigFileError(ValueError):
    pass


# -- search pool configs -------------------------------------------------------


def _sequence(kind, spec, noise_size):
    if isinstance(spec, int):
        spec = {"size": spec}
    before, after = spec.get("noise_before", 0), spec.get("noise_after", 0)
    return InteractionSequence(
        kind, spec["size"], before, after, spec.get("noise_size", noise_size) if before or after else None
    )


def load_pool_config(path):
    """Read a search problem.

    Keys: ``sizes`` (alloc/free sequences offered), ``fst`` and ``snd``
    (a size or an object with size/noise_before/noise_after/noise_size),
    ``d`` (target distance, or "below"/"above" for fst directly below or
    above snd), optional ``state``, ``profile``, ``g``, ``m``, ``r``,
    ``seed``. Returns (pool, params, profile name or None); a symbolic
    ``d`` is left for :func:`resolve_target`.
    """
    try:
        raw = json.loads(Path(path).read_text())
        noise_size = raw.get("noise_size")
        state = load_state(raw["state"]).directives if raw.get("state") else ()
        sizes = sorted(set(raw["sizes"]))
        pool = SequencePool(
            alloc={s: (InteractionSequence("alloc", s),) for s in sizes},
            free={s: (InteractionSequence("free", s),) for s in sizes},
            fst=_sequence("fst", raw["fst"], noise_size),
            snd=_sequence("snd", raw["snd"], noise_size),
            starting_state=state,
        )
        d = raw["d"]
        if d not in ("below", "above") and not isinstance(d, int):
            raise ValueError(f"d must be an integer, 'below' or 'above', got {d!r}")
        params = SearchParams(
            g=raw.get("g", 50_000), d=d if isinstance(d, int) else 0, m=raw.get("m", 1000), r=raw.get("r", 98), seed=raw.get("seed", 0)
        )
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    if isinstance(d, str):
        params = _Symbolic(params, d)
    return pool, params, raw.get("profile")


class _Symbolic:
    def __init__(self, params, where):
        self.params, self.where = params, where


def resolve_target(params, pool, config) -> SearchParams:
    """Turn a symbolic target into the adjacency distance under ``config``."""
    if not isinstance(params, _Symbolic):
        return params
    if params.where == "below":
        d = -size_class_of(config, pool.fst.primary_size).size
    else:
        d = size_class_of(config, pool.snd.primary_size).size
    return replace(params.params, d=d)


# -- grid configs --------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    sizes: tuple = GRID_SIZES
    noises: tuple = GRID_NOISES
    profiles: tuple = ("avrlibc-like", "dlmalloc-like", "tcmalloc-like")
    states: tuple = STATE_NAMES
    budget: int = 50_000
    m: int = 1000
    r: int = 98
    seeds: tuple = (0,)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @property
    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def specs(self):
        return generate_grid(self.sizes, self.noises, self.profiles, self.states)


def load_grid_config(path) -> GridConfig:
    try:
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(GridConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)}")
        cfg = GridConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    except (OSError, TypeError, ValueError) as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    if not (cfg.sizes and cfg.noises and cfg.profiles and cfg.states and cfg.seeds):
        raise ConfigFileError(f"{path}: sizes, noises, profiles, states and seeds must be nonempty")
    ints = {"sizes": cfg.sizes, "noises": cfg.noises, "seeds": cfg.seeds, "budget": (cfg.budget,), "m": (cfg.m,), "r": (cfg.r,)}
    for key, vals in ints.items():
        if not isinstance(vals, tuple) or not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
            raise ConfigFileError(f"{path}: {key} must be integers")
    if min(cfg.sizes) < 1 or min(cfg.noises) < 0 or cfg.budget < 1 or cfg.m < 1 or not 0 <= cfg.r <= 100:
        raise ConfigFileError(f"{path}: value out of range")
    return cfg


# -- bench ---------------------------------------------------------------------


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def record_key(spec, run):
    return f"{spec.key}#{run}"


@dataclass
class RunManifest:
    version: str
    config_hash: str
    config: dict
    seeds: list
    experiment_seeds: dict = field(default_factory=dict)  # record key -> seed
    started: str = ""
    updated: str = ""
    finished: str | None = None

    def write(self, out_dir):
        tmp = Path(out_dir) / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        tmp.replace(Path(out_dir) / MANIFEST)

    @classmethod
    def read(cls, out_dir):
        return cls(**json.loads((Path(out_dir) / MANIFEST).read_text()))


class ManifestMismatch(RuntimeError):
    pass


def _job(args):
    spec, cfg, run, seed = args
    return run, run_experiment(spec, g=cfg.budget, m=cfg.m, r=cfg.r, master_seed=seed, run=run)


def load_checkpoint(out_dir):
    done = {}
    path = Path(out_dir) / CHECKPOINT
    if not path.exists():
        return done
    lines = path.read_text().splitlines()
    good = []
    for line in lines:
        try:
            res = ExperimentResult.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            break  # torn final line from an interrupted write
        done[record_key(res.spec, res.run)] = res
        good.append(line)
    if len(good) != len(lines):
        path.write_text("".join(line + "\n" for line in good))
    return done


def run_bench(cfg: GridConfig, out_dir, workers=1, log=None, limit=None):
    """Run (or resume) every experiment of ``cfg``; returns (results, rows).

    ``limit`` caps how many new experiments run in this call, which leaves
    a partial checkpoint behind (used to exercise resumption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = cfg.specs()
    jobs = [(spec, run, seed) for run, seed in enumerate(cfg.seeds) for spec in specs]
    if (out / MANIFEST).exists():
        manifest = RunManifest.read(out)
        if manifest.config_hash != cfg.hash:
            raise ManifestMismatch(f"{out} holds results for a different grid config")
    else:
        manifest = RunManifest(__version__, cfg.hash, cfg.to_dict(), list(cfg.seeds), started=_now())
    for spec, run, seed in jobs:
        manifest.experiment_seeds[record_key(spec, run)] = experiment_seed(seed, spec, run)
    done = load_checkpoint(out)
    todo = [(spec, cfg, run, seed) for spec, run, seed in jobs if record_key(spec, run) not in done]
    if limit is not None:
        todo = todo[:limit]
    manifest.updated = _now()
    manifest.write(out)
    if log:
        log(f"{len(done)} of {len(jobs)} experiments already done, running {len(todo)}")
    with open(out / CHECKPOINT, "a") as ck:
        for run, res in _map(_job, todo, workers):
            done[record_key(res.spec, run)] = res
            ck.write(json.dumps(res.to_dict(), sort_keys=True) + "\n")
            ck.flush()
            if log:
                log(f"{res.spec.key} run {run}: {'solved' if res.solved else 'unsolved'} best={res.final_distance} target={res.target}")
    results = [done[record_key(spec, run)] for spec, run, _ in jobs if record_key(spec, run) in done]
    complete = len(results) == len(jobs)
    rows = aggregate(results, per_class=len(cfg.seeds) * _per_class(cfg))
    (out / "results.csv").write_text(rows_to_csv(rows))
    (out / "results.json").write_text(json.dumps([r.to_dict() for r in results], indent=1, sort_keys=True) + "\n")
    manifest.updated = _now()
    manifest.finished = manifest.updated if complete else None
    manifest.write(out)
    return results, rows


def _per_class(cfg):
    n = len(set(cfg.sizes))
    return n * n  # n*(n-1)/2 pairs * 2 + n same-size cells, per relationship


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        for it in items:
            yield fn(it)
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield from ex.map(fn, items, chunksize=1)
