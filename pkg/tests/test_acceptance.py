"""One test per acceptance criterion, at the stated tolerances.

Criteria 3-6 share a single noise sweep (the shipped noise-sweep grid:
php-emalloc start state, seed 0, g=50,000, m=1000, r=98) that runs once
per session. It takes about 20 minutes on one core.
"""

import os
import random
from importlib import resources

import pytest

from heapsieve.alloc_model import AllocatorConfig, alloc, dealloc, heap_snapshot, new_heap, profile
from heapsieve.driver import DriverProgram, execute, run_external
from heapsieve.cli import main
from heapsieve.harness import load_grid_config, run_bench
from heapsieve.rng import SplitMix64
from heapsieve.template import FragmentDB, instantiate, load_fragment_db, parse_template, template_search

from conftest import PROFILES, random_directives
from oracles import best_fit_mismatches, random_invariant_run, random_ops
from test_alloc_model import _UserApi
from test_driver import make_driver

FREE_LISTS = ("ideal", "dlmalloc-like")
SEGREGATED = "tcmalloc-like"


def _grid(name):
    return resources.files("heapsieve.data").joinpath("grids", name)


@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    cfg = load_grid_config(_grid("noise-sweep.json"))
    _, rows = run_bench(cfg, tmp_path_factory.mktemp("sweep"), workers=os.cpu_count() or 1)
    table = {(r.allocator, r.noise): r for r in rows if r.start_state == "php-emalloc"}
    assert len(table) == 9 and not any(r.partial for r in table.values())
    return table


# -- 1. figures ----------------------------------------------------------------


def test_c01_figures():
    def split(side):
        heap = new_heap(AllocatorConfig(split_from=side))
        a = alloc(heap, 128)
        alloc(heap, 8)
        dealloc(heap, a)
        return alloc(heap, 32), alloc(heap, 16)

    assert split("front") == (0, 32)  # layout A: both carved from the low end
    assert split("end") == (96, 80)  # layout B: both carved from the high end

    def holes(mode):
        heap = new_heap(AllocatorConfig(coalescing=mode, delay_threshold=10))
        a, b, _ = alloc(heap, 128), alloc(heap, 128), alloc(heap, 8)
        dealloc(heap, a)
        dealloc(heap, b)
        return [x.footprint for x in heap_snapshot(heap) if x.region == "arena" and x.state == "free"]

    assert holes("immediate") == [256]
    assert holes("delayed") == [128, 128]


# -- 2. walkthrough ------------------------------------------------------------


def test_c02_walkthrough():
    api = _UserApi()
    seen = []
    for name in ("charlie", "bob", "a", "eve"):
        api.create(name)
    api.destroy("charlie")
    api.destroy("a")
    seen.append(api.holes())
    user = alloc(api.heap, 12, tag="User")
    seen.append(api.holes())
    name = alloc(api.heap, 8, tag="name")
    seen.append(api.holes())
    ident = alloc(api.heap, 4, tag="id")
    seen.append(api.holes())
    api.users["mallory"] = (user, name, ident)
    assert seen == [[18, 24], [6, 24], [6, 16], [2, 16]]
    _, sam_name, _ = api.create("sam")
    bob_user = api.users["bob"][0]
    assert sam_name + 4 == bob_user
    tags = {b.offset: b.tag for b in heap_snapshot(api.heap)}
    assert (tags[sam_name], tags[bob_user]) == ("name", "User")


# -- 3-6. noise sweep ----------------------------------------------------------


def test_c03_noise0_free_lists(sweep):
    got = {p: sweep[p, 0].pct_overall for p in FREE_LISTS}
    assert all(v >= 95 for v in got.values()), got


def test_c04_segregated_gap(sweep):
    tc = sweep[SEGREGATED, 0].pct_overall
    assert tc >= 50
    assert all(tc < sweep[p, 0].pct_overall for p in FREE_LISTS), (tc, [sweep[p, 0].pct_overall for p in FREE_LISTS])


def test_c05_ordering(sweep):
    bad = {k: (r.pct_natural, r.pct_reversed) for k, r in sweep.items() if r.pct_natural < r.pct_reversed}
    assert not bad, bad
    dl = sweep["dlmalloc-like", 4]
    assert dl.pct_natural - dl.pct_reversed >= 15


def test_c06_noise_monotone(sweep):
    for p in FREE_LISTS + (SEGREGATED,):
        pcts = [sweep[p, n].pct_overall for n in (0, 1, 4)]
        assert pcts == sorted(pcts, reverse=True), (p, pcts)


# -- 7. best-fit oracle --------------------------------------------------------


def test_c07_best_fit_oracle():
    configs = [profile("ideal"), profile("dlmalloc-like"), profile("avrlibc-like")]
    rng = random.Random(7)
    mismatches = []
    for i in range(1000):
        mismatches += best_fit_mismatches(configs[i % 3], random_ops(rng, 200))
    assert mismatches == []


# -- 8. structural invariants --------------------------------------------------


@pytest.mark.parametrize("name", PROFILES + ("delayed",))
def test_c08_invariants(name):
    cfg = AllocatorConfig(coalescing="delayed", delay_threshold=8) if name == "delayed" else profile(name)
    assert random_invariant_run(cfg, random.Random(name), 10_000) == []


# -- 9. determinism ------------------------------------------------------------


def test_c09_determinism(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("HEAPSIEVE_WORKERS", raising=False)
    pool = tmp_path / "pool.json"
    pool.write_text('{"sizes": [8, 64, 512], "fst": 512, "snd": 8, "d": "below", "state": "php-emalloc", "g": 50000}')
    tpl = str(resources.files("heapsieve.data").joinpath("templates", "adjacency.tpl"))
    files = {}
    for workers in (1, 8):
        out = tmp_path / f"w{workers}"
        flags = ["--seed", "11", "--workers", str(workers)]
        assert main(["search", str(pool), "--profile", "dlmalloc-like", *flags, "--out-dir", str(out / "search")]) == 0
        # the template's literal -32 assumes no headers
        assert main(["template", tpl, "--profile", "ideal", *flags, "--out-dir", str(out / "template")]) == 0
        run_bench(load_grid_config(_grid("tiny.json")), out / "bench", workers=workers)
        files[workers] = [
            (out / "search" / "solution.trace").read_bytes(),
            (out / "template" / "solution.trace").read_bytes(),
            (out / "bench" / "results.csv").read_bytes(),
        ]
    assert files[1] == files[8]


# -- 10. external driver loop --------------------------------------------------


def test_c10_external_driver(tmp_path):
    drv = make_driver(tmp_path)
    rng = random.Random(10)
    ideal = profile("ideal")
    mismatches = []
    for i in range(1000):
        p = DriverProgram(tuple(random_directives(rng, rng.randint(2, 80), markers=True)))
        want = execute(p, ideal).distance
        got = run_external(drv, p).distance
        if got != want:
            mismatches.append((i, want, got))
    assert mismatches == []


# -- 11. templates -------------------------------------------------------------


def test_c11_template():
    tpl = parse_template(resources.files("heapsieve.data").joinpath("templates", "adjacency.tpl").read_text())
    db = load_fragment_db(resources.files("heapsieve.data").joinpath("fragments"))
    out = template_search(tpl, db, g=50_000, seed=0, config=profile("ideal"))
    assert out.solved and out.best_distance == -32

    bias_db = FragmentDB.from_texts([("clean", "<malloc 8 a>\n"), ("noisy", "#@primary 8\n<malloc 8 a>\n<malloc 24 b>\n<malloc 40 c>\n")])
    assert [f.summary.noise_count for f in bias_db.fragments] == [0, 2]
    pick = parse_template("#X-SHRIKE <HEAP-MANIP 8>\n#X-SHRIKE <RECORD-ALLOC 0 a>\n<malloc 8 x>\n"
                          "#X-SHRIKE <RECORD-ALLOC 0 b>\n<malloc 8 y>\n#X-SHRIKE <REQUIRE-DISTANCE a b -8>\n")
    rng = SplitMix64(11)
    noisy = sum(
        any(getattr(d, "size", 0) == 24 for d in instantiate(pick, bias_db, 1, 100, rng).directives) for _ in range(10_000)
    )
    assert 10_000 - noisy > noisy
