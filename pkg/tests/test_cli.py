import json
from importlib import resources
from pathlib import Path

import pytest

from heapsieve.alloc_model import AllocatorConfig
from heapsieve.cli import driver_main, main
from heapsieve.render import render_ascii, render_svg

from test_driver import make_driver

GOLDEN = Path(__file__).parent / "golden"
SPLIT = "<malloc 128 a>\n<malloc 8 b>\n<free a>\n<fst 32>\n<snd 16>\n"


def _file(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _out(capsys):
    return capsys.readouterr().out.splitlines()


def _pool(tmp_path, **extra):
    obj = {"sizes": [32, 64], "fst": 32, "snd": 64, "d": "below", "state": "php-emalloc", "g": 20_000} | extra
    return _file(tmp_path, "pool.json", json.dumps(obj))


# -- exec and render -----------------------------------------------------------


def test_exec_minimal(tmp_path, capsys):
    assert main(["exec", _file(tmp_path, "p.trace", "<fst 32>\n<snd 16>\n")]) == 0
    assert _out(capsys) == ["-32"]


def test_exec_render(tmp_path, capsys):
    assert main(["exec", _file(tmp_path, "p.trace", SPLIT), "--render"]) == 0
    assert _out(capsys) == ["-32", "[A:32][A:16][F:80][A:8]"]


def test_exec_render_svg_golden(tmp_path, capsys):
    svg = tmp_path / "heap.svg"
    assert main(["exec", _file(tmp_path, "p.trace", SPLIT), "--render-svg", str(svg)]) == 0
    assert svg.read_text() == (GOLDEN / "split.svg").read_text()


def test_render_subcommand(tmp_path, capsys):
    assert main(["render", _file(tmp_path, "p.trace", SPLIT), "--profile", "dlmalloc-like"]) == 0
    assert _out(capsys)[0].startswith("[A:40][A:24]")


def test_exec_checks_printed(tmp_path, capsys):
    text = "#@record x\n<malloc 8 a>\n#@record y\n<malloc 8 b>\n#@require y x 8\n"
    assert main(["exec", _file(tmp_path, "p.trace", text)]) == 0
    assert _out(capsys) == ["NA", "CHECK y x 8 8"]


def test_exec_parse_error(tmp_path, capsys):
    assert main(["exec", _file(tmp_path, "p.trace", "<fst 8>\n<bogus>\n")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_exec_missing_file(tmp_path):
    assert main(["exec", str(tmp_path / "nope")]) == 2


def test_exec_bad_profile(tmp_path):
    assert main(["exec", _file(tmp_path, "p.trace", "<fst 8>\n<snd 8>\n"), "--profile", "glibc"]) == 2


def test_exec_execution_error(tmp_path, capsys):
    cfg = _file(tmp_path, "small.json", json.dumps(AllocatorConfig(capacity=4096).to_dict()))
    trace = _file(tmp_path, "p.trace", "<malloc 9000 a>\n<fst 8>\n<snd 8>\n")
    assert main(["exec", trace, "--config", cfg]) == 3
    assert "execution failed" in capsys.readouterr().err


def test_driver_entry(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HEAPSIEVE_PROFILE", "dlmalloc-like")
    assert driver_main([_file(tmp_path, "p.trace", "<fst 16>\n<snd 16>\n")]) == 0
    assert _out(capsys) == ["-24"]
    assert driver_main([]) == 2


def test_svg_scale_and_elision():
    from heapsieve.driver import execute, parse_directives
    from heapsieve.alloc_model import profile

    snap = execute(parse_directives("".join(f"<malloc 64 a{i}>\n" for i in range(100)) + "<fst 8>\n<snd 8>\n"), profile("ideal")).snapshot
    svg = render_svg(snap, alignment=8, max_width=200)
    # 22 cells of 8 px fit before the 24 px marker
    assert svg.count("<rect x=") == 23 and '<rect x="176" y="0" width="24"' in svg
    assert "80 more blocks elided" in svg
    assert 'width="200"' in svg
    full = render_svg(snap, alignment=8)
    assert "elided" not in full and full.count("<rect x=") == 102


def test_ascii_marks_mapped():
    from heapsieve.driver import execute, parse_directives
    from heapsieve.alloc_model import profile

    snap = execute(parse_directives("<fst 8>\n<snd 300000>\n"), profile("dlmalloc-like")).snapshot
    assert render_ascii(snap).endswith("]") and "[M:" in render_ascii(snap)


# -- search --------------------------------------------------------------------


def test_search_solves_and_replays(tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["search", _pool(tmp_path), "--profile", "dlmalloc-like", "--out-dir", str(out)])
    assert rc == 0
    summary = json.loads((out / "outcome.json").read_text())
    assert summary["solved"] and summary["target"] == -40 and summary["seed"] == 0
    capsys.readouterr()
    assert main(["exec", str(out / "solution.trace"), "--profile", "dlmalloc-like"]) == 0
    assert _out(capsys) == ["-40"]


def test_search_profile_from_config(tmp_path):
    out = tmp_path / "out"
    assert main(["search", _pool(tmp_path, profile="dlmalloc-like"), "--out-dir", str(out)]) == 0
    assert json.loads((out / "outcome.json").read_text())["profile"] == "dlmalloc-like"


def test_search_unsolved(tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["search", _pool(tmp_path, d=1), "--budget", "50", "--seed", "5", "--out-dir", str(out)])
    assert rc == 4
    assert "best distance" in capsys.readouterr().out
    summary = json.loads((out / "outcome.json").read_text())
    assert (summary["solved"], summary["seed"], summary["candidates_tried"]) == (False, 5, 50)
    assert (out / "best.trace").exists()


def test_search_bad_pool(tmp_path):
    assert main(["search", _file(tmp_path, "pool.json", "{}")]) == 2


def test_search_external_driver(tmp_path):
    drv = make_driver(tmp_path)
    pool = _file(tmp_path, "pool.json", json.dumps({"sizes": [64], "fst": 64, "snd": 64, "d": -64, "g": 40}))
    assert main(["search", pool, "--driver", str(drv), "--out-dir", str(tmp_path / "o")]) == 0


def test_search_broken_driver(tmp_path):
    drv = make_driver(tmp_path, "sys.exit(1)")
    pool = _file(tmp_path, "pool.json", json.dumps({"sizes": [64], "fst": 64, "snd": 64, "d": -64, "g": 5}))
    # driver failures count as non-solutions
    assert main(["search", pool, "--driver", str(drv), "--out-dir", str(tmp_path / "o")]) == 4
    assert json.loads((tmp_path / "o" / "outcome.json").read_text())["failures"] == 5


def test_workers_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HEAPSIEVE_WORKERS", "2")
    out = tmp_path / "out"
    assert main(["search", _pool(tmp_path), "--profile", "dlmalloc-like", "--out-dir", str(out)]) == 0


# -- template ------------------------------------------------------------------


def _adjacency():
    return str(resources.files("heapsieve.data").joinpath("templates", "adjacency.tpl"))


def test_template_solves(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["template", _adjacency(), "--seed", "0", "--out-dir", str(out)]) == 0
    assert json.loads((out / "outcome.json").read_text())["seed"] == 0
    capsys.readouterr()
    assert main(["exec", str(out / "solution.trace")]) == 0
    assert _out(capsys) == ["NA", "CHECK src dst -32 -32"]


def test_template_missing_fragment(tmp_path, capsys):
    tpl = Path(_adjacency()).read_text().replace("HEAP-MANIP 32 64", "HEAP-MANIP 24")
    assert main(["template", _file(tmp_path, "t.tpl", tpl), "--out-dir", str(tmp_path)]) == 2
    assert "24" in capsys.readouterr().err


def test_template_parse_error(tmp_path):
    assert main(["template", _file(tmp_path, "t.tpl", "#X-SHRIKE <NOPE>\n"), "--out-dir", str(tmp_path)]) == 2


# -- bench ---------------------------------------------------------------------


def test_bench_tiny(tmp_path, capsys):
    grid = str(resources.files("heapsieve.data").joinpath("grids", "tiny.json"))
    out = tmp_path / "bench"
    assert main(["bench", grid, "--out-dir", str(out), "-q"]) == 0
    lines = _out(capsys)
    assert lines[0] == "allocator,start_state,noise,pct_overall,pct_natural,pct_reversed,n_natural,n_reversed,partial"
    assert len(lines) == 2
    assert (out / "results.csv").read_text().splitlines() == lines
    # a second run finds everything in the checkpoint
    assert main(["bench", grid, "--out-dir", str(out), "-q"]) == 0
    assert _out(capsys) == lines


def test_bench_config_change_refused(tmp_path):
    grid = str(resources.files("heapsieve.data").joinpath("grids", "tiny.json"))
    out = str(tmp_path / "bench")
    assert main(["bench", grid, "--out-dir", out, "--budget", "10", "-q"]) == 0
    assert main(["bench", grid, "--out-dir", out, "--budget", "11", "-q"]) == 2


@pytest.mark.parametrize("argv", [[], ["frobnicate"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2
