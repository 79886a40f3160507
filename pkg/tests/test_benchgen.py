import csv
import io
from dataclasses import replace

import pytest

from heapsieve.alloc_model import AllocatorConfig, profile
from heapsieve.benchgen import (
    CSV_HEADER,
    GRID_SIZES,
    STATE_COUNTS,
    STATE_NAMES,
    ExperimentResult,
    ExperimentSpec,
    StartingState,
    aggregate,
    canonicalize_ids,
    experiment_pool,
    generate_grid,
    load_state,
    pct,
    rows_to_csv,
    run_experiment,
    state_trace,
    synthesize_state,
    target_distance,
)
from heapsieve.driver import Free, Malloc, Realloc
from heapsieve.search import Relationship, classify_relationship


def _spec(src, dst, direction, order, noise=0, prof="ideal"):
    return ExperimentSpec(prof, "php-emalloc", src, dst, direction, order, noise)


# -- grid ----------------------------------------------------------------------


def test_full_grid_count():
    assert len(generate_grid()) == 2592
    assert len(generate_grid(profiles=("ideal",), states=("php-emalloc",), noises=(0,))) == 72


def test_degenerate_grid():
    specs = generate_grid(sizes=(64,), noises=(0,), profiles=("ideal",), states=("php-emalloc",))
    assert [(s.direction.value, s.order.value) for s in specs] == [("overflow", "src-first"), ("underflow", "src-first")]


def test_grid_halves():
    specs = generate_grid(profiles=("ideal",), states=("php-emalloc",), noises=(0,))
    rel = [s.relationship for s in specs]
    assert rel.count(Relationship.NATURAL) == rel.count(Relationship.REVERSED) == 36
    for s in specs:
        assert s.relationship is classify_relationship(s.order, s.direction)
        assert s.src_size in GRID_SIZES and s.dst_size in GRID_SIZES
    assert len({s.key for s in specs}) == 72


def test_grid_covers_every_layout_problem():
    # a layout problem is (first size, second size, first-below-second)
    specs = generate_grid(profiles=("ideal",), states=("php-emalloc",), noises=(0,))
    problems = set()
    for s in specs:
        src_below = s.direction.value == "overflow"
        first_below = src_below if s.order.value == "src-first" else not src_below
        problems.add((s.first_size, s.second_size, first_below))
    assert len(problems) == 72  # every ordered (first, second) pair in both placements


# -- targets -------------------------------------------------------------------


def test_target_ideal_480():
    assert target_distance(_spec(480, 16, "overflow", "src-first"), profile("ideal")) == -480


def test_target_header():
    cfg = AllocatorConfig(header_bytes=8)
    assert target_distance(_spec(30, 16, "overflow", "src-first"), cfg) == -40


def test_target_underflow_dst_first():
    assert target_distance(_spec(16, 64, "underflow", "dst-first"), profile("ideal")) == -64


@pytest.mark.parametrize(
    "direction, order, expect", [("overflow", "dst-first", 8), ("underflow", "src-first", 64)]
)
def test_target_second_below(direction, order, expect):
    # first-allocated buffer must sit above: d = +footprint(second)
    spec = _spec(8, 64, direction, order)
    assert target_distance(spec, profile("ideal")) == spec.second_size == expect


# -- pools ---------------------------------------------------------------------


@pytest.mark.parametrize("noise, before, after", [(0, 0, 0), (1, 1, 0), (4, 2, 2)])
def test_noise_split(noise, before, after):
    st = load_state("php-emalloc")
    pool = experiment_pool(_spec(64, 512, "overflow", "dst-first", noise), st)
    for seq in (pool.fst, pool.snd):
        assert (seq.noise_before, seq.noise_after) == (before, after)
        if noise:
            assert seq.noise_size == 64
    assert pool.fst.primary_size == 512 and pool.snd.primary_size == 64
    assert set(pool.sizes) == {64, 512}


# -- states --------------------------------------------------------------------


@pytest.mark.parametrize("name", STATE_NAMES)
def test_shipped_state_counts(name):
    st = load_state(name)
    allocs, frees = STATE_COUNTS[name]
    assert (st.stats.allocs, st.stats.frees, st.stats.interactions) == (allocs, frees, allocs + frees)


def test_php_emalloc_matches_table():
    assert load_state("php-emalloc").stats.interactions == 571


@pytest.mark.parametrize("name", STATE_NAMES)
def test_shipped_states_regenerate(name):
    assert state_trace(synthesize_state(name)) == state_trace(load_state(name))


def test_synth_window_one_is_stack():
    st = synthesize_state("tiny", allocs=50, frees=30, seed=3, window=1)
    live = []
    for d in st.directives:
        if type(d) is Free:
            assert d.id == live.pop()
        else:
            live.append(d.id)


def test_stats_mismatch_rejected():
    st = load_state("php-emalloc")
    with pytest.raises(ValueError):
        StartingState("x", st.directives, st.stats.__class__(1, 1, 0))


def test_load_state_file(tmp_path):
    p = tmp_path / "mine.trace"
    p.write_text("<malloc 8 foo>\n<malloc 16 h1>\n<realloc foo 32 bar>\n<free h1>\n")
    st = load_state(p)
    assert st.name == "mine"
    assert st.directives == (Malloc(8, "s0"), Malloc(16, "s1"), Realloc("s0", 32, "s2"), Free("s1"))


def test_state_with_markers_rejected(tmp_path):
    p = tmp_path / "bad.trace"
    p.write_text("<fst 8>\n<snd 8>\n")
    with pytest.raises(ValueError):
        load_state(p)


def test_canonicalize_ids_reuse():
    out = canonicalize_ids((Malloc(8, "a"), Free("a"), Malloc(8, "a")))
    assert out == (Malloc(8, "s0"), Free("s0"), Malloc(8, "s1"))


# -- aggregation ---------------------------------------------------------------


def _results(solve):
    specs = generate_grid(profiles=("ideal",), states=("php-emalloc",), noises=(0,))
    return [ExperimentResult(s, solve(s), 0, 0 if solve(s) else 8, 8, 1, 0.0, 10, 0) for s in specs]


def test_aggregate_all_solved():
    (row,) = aggregate(_results(lambda s: True), per_class=36)
    assert (row.pct_overall, row.pct_natural, row.pct_reversed, row.partial) == (100, 100, 100, False)


def test_aggregate_natural_half():
    (row,) = aggregate(_results(lambda s: s.relationship is Relationship.NATURAL), per_class=36)
    assert (row.pct_overall, row.pct_natural, row.pct_reversed) == (50, 100, 0)


def test_aggregate_partial():
    res = _results(lambda s: True)[:-1]
    (row,) = aggregate(res, per_class=36)
    assert row.partial


def test_aggregate_averaged_rows():
    a = _results(lambda s: True)
    b = [ExperimentResult(ExperimentSpec(r.spec.profile, "ruby-malloc", r.spec.src_size, r.spec.dst_size,
                                         r.spec.direction, r.spec.order, 0), False, 0, 8, 8, None, None, 10, 0) for r in a]
    rows = aggregate(a + b, per_class=36)
    avg = [r for r in rows if r.start_state == "averaged"]
    assert len(rows) == 3 and len(avg) == 1
    assert (avg[0].pct_overall, avg[0].n_natural, avg[0].partial) == (50, 72, False)


def test_pct_rounding():
    assert pct(1, 3) == 33 and pct(1, 2) == 50 and pct(1, 8) == 13 and pct(0, 0) is None


def test_csv_shape():
    text = rows_to_csv(aggregate(_results(lambda s: True), per_class=36))
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_HEADER
    assert rows[1] == ["ideal", "php-emalloc", "0", "100", "100", "100", "36", "36", "0"]


def test_result_roundtrip():
    (r,) = _results(lambda s: True)[:1]
    assert ExperimentResult.from_dict(r.to_dict()) == r


# -- running -------------------------------------------------------------------


def test_run_experiment_natural_small():
    spec = _spec(64, 64, "overflow", "src-first")
    res = run_experiment(spec, g=20_000)
    assert res.solved and res.final_distance == res.target == -64
    assert res.initial_distance is not None


def test_run_experiment_repeatable():
    spec = _spec(8, 512, "underflow", "dst-first", noise=1, prof="dlmalloc-like")
    a, b = run_experiment(spec, g=3000), run_experiment(spec, g=3000)
    # wall-clock time is the only field allowed to differ
    assert replace(a, time_to_best=None) == replace(b, time_to_best=None)
