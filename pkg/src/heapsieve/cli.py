"""Command-line front end.

Exit codes: 0 success (or solved), 2 bad input, 3 execution failure,
4 search finished without a solution.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_PARSE, EXIT_EXEC, EXIT_UNSOLVED = 0, 2, 3, 4

log = logging.getLogger("heapsieve")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _allocator(args):
    from .alloc_model import ConfigError, load_config, profile

    try:
        if args.config:
            return load_config(args.config)
        return profile(args.profile or "ideal")
    except (OSError, ValueError, ConfigError) as exc:
        raise CliError(EXIT_PARSE, f"allocator config: {exc}") from exc


def _read_program(path):
    from .driver import ParseError, parse_directives

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"cannot read {path}: {exc.strerror}") from exc
    try:
        return parse_directives(text, require_markers=False)
    except ParseError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from exc


def _run_program(program, config):
    from .driver import ExecutionError, execute

    try:
        return execute(program, config)
    except ExecutionError as exc:
        raise CliError(EXIT_EXEC, f"execution failed at {exc}") from exc


def _report(result, out=None):
    out = out or sys.stdout
    print("NA" if result.distance is None else result.distance, file=out)
    for x, y, obs, req in result.checks:
        print(f"CHECK {x} {y} {obs} {req}", file=out)
    if result.failure:
        log.warning(result.failure)


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _workers(args):
    from .search import default_workers

    return default_workers(args.workers)


# -- subcommands -----------------------------------------------------------------


def cmd_exec(args):
    from .render import render_ascii, render_svg

    config = _allocator(args)
    result = _run_program(_read_program(args.trace), config)
    _report(result)
    if args.render:
        print(render_ascii(result.snapshot))
    if args.render_svg:
        _write(args.render_svg, render_svg(result.snapshot, config.alignment))
    return EXIT_OK


def cmd_render(args):
    from .render import render_ascii, render_svg

    config = _allocator(args)
    result = _run_program(_read_program(args.trace), config)
    print(render_ascii(result.snapshot))
    if args.render_svg:
        _write(args.render_svg, render_svg(result.snapshot, config.alignment))
    return EXIT_OK


def _outcome_dict(outcome, seed, profile_name):
    return {
        "version": __version__,
        "profile": profile_name,
        "seed": seed,
        "solved": outcome.solved,
        "target": outcome.target,
        "best_distance": outcome.best_distance,
        "candidates_tried": outcome.candidates_tried,
        "candidates_to_best": outcome.candidates_to_best,
        "failures": outcome.failures,
        "time_to_best": outcome.time_to_best,
        "elapsed": outcome.elapsed,
    }


def _finish_search(args, outcome, program, seed, config):
    from .driver import serialize

    out_dir = Path(args.out_dir)
    name = "solution.trace" if outcome.solved else "best.trace"
    if program is not None:
        _write(out_dir / name, serialize(program))
    summary = _outcome_dict(outcome, seed, config.name)
    _write(out_dir / "outcome.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if outcome.solved:
        print(f"solved after {outcome.candidates_tried} candidates: distance {outcome.best_distance}; wrote {out_dir / name}")
        return EXIT_OK
    print(f"unsolved after {outcome.candidates_tried} candidates: best distance {outcome.best_distance} (target {outcome.target})")
    return EXIT_UNSOLVED


def cmd_search(args):
    from dataclasses import replace

    from .driver import DriverProtocolError
    from .harness import ConfigFileError, load_pool_config, resolve_target
    from .search import ExternalExecutor, SimulatedExecutor, search

    try:
        pool, params, prof = load_pool_config(args.pool)
    except ConfigFileError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    if args.profile is None and args.config is None and prof:
        args.profile = prof
    config = _allocator(args)
    params = resolve_target(params, pool, config)
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    if args.budget is not None:
        params = replace(params, g=args.budget)
    if args.driver:
        executor = ExternalExecutor(args.driver)
    else:
        executor = SimulatedExecutor(config, pool.starting_state)
    try:
        outcome = search(pool, params, executor, workers=_workers(args))
    except DriverProtocolError as exc:
        raise CliError(EXIT_EXEC, str(exc)) from exc
    best = outcome.best_candidate.program if outcome.best_candidate else None
    return _finish_search(args, outcome, best, params.seed, config)


def cmd_template(args):
    from importlib import resources

    from .driver import DriverProtocolError, ParseError
    from .template import (
        MissingFragment,
        TemplateError,
        TemplateExternalExecutor,
        TemplateSimExecutor,
        load_fragment_db,
        parse_template,
        template_search,
    )

    config = _allocator(args)
    try:
        tpl = parse_template(Path(args.template).read_text())
        db_dir = args.db or resources.files("heapsieve.data").joinpath("fragments")
        db = load_fragment_db(db_dir, config)
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"cannot read input: {exc}") from exc
    except (TemplateError, ParseError) as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    executor = TemplateExternalExecutor(args.driver) if args.driver else TemplateSimExecutor(config)
    seed = 0 if args.seed is None else args.seed
    try:
        outcome = template_search(
            tpl, db, g=args.budget or 50_000, m=args.m, r=args.r, seed=seed, executor=executor, workers=_workers(args)
        )
    except MissingFragment as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    except DriverProtocolError as exc:
        raise CliError(EXIT_EXEC, str(exc)) from exc
    return _finish_search(args, outcome, outcome.best_candidate, seed, config)


def cmd_bench(args):
    from dataclasses import replace

    from .harness import ConfigFileError, ManifestMismatch, load_grid_config, run_bench
    from .benchgen import rows_to_csv

    try:
        cfg = load_grid_config(args.grid)
    except ConfigFileError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.budget is not None:
        cfg = replace(cfg, budget=args.budget)
    try:
        _, rows = run_bench(cfg, args.out_dir, workers=_workers(args), log=log.info)
    except ManifestMismatch as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    sys.stdout.write(rows_to_csv(rows))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _alloc_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--profile", help="shipped allocator profile (default: ideal)")
    g.add_argument("--config", help="allocator config JSON file")


def _search_flags(p):
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--budget", type=int, help="candidate budget g")
    p.add_argument("--workers", type=int, default=1, help="worker processes (HEAPSIEVE_WORKERS overrides)")
    p.add_argument("--out-dir", default=".", help="where result files go")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    ap = argparse.ArgumentParser(prog="heapsieve", description="Heap layout manipulation by pseudo-random search.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("exec", parents=[common], help="run a directive file and print the fst - snd distance")
    p.add_argument("trace")
    _alloc_flags(p)
    p.add_argument("--render", action="store_true", help="print the final heap as [A:n][F:n] cells")
    p.add_argument("--render-svg", metavar="FILE", help="write the final heap as an SVG strip")
    p.set_defaults(func=cmd_exec)

    p = sub.add_parser("render", parents=[common], help="draw the heap a directive file leaves behind")
    p.add_argument("trace")
    _alloc_flags(p)
    p.add_argument("--render-svg", metavar="FILE", help="also write an SVG strip")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("search", parents=[common], help="search for a candidate reaching a target distance")
    p.add_argument("pool", help="pool config JSON")
    _alloc_flags(p)
    _search_flags(p)
    p.add_argument("--driver", help="external driver executable")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("template", parents=[common], help="search over instantiations of a template")
    p.add_argument("template")
    p.add_argument("--db", help="fragment directory (default: shipped fragments)")
    _alloc_flags(p)
    _search_flags(p)
    p.add_argument("--driver", help="external driver executable")
    p.add_argument("-m", type=int, default=1000, help="max fragments per HEAP-MANIP")
    p.add_argument("-r", type=int, default=98, help="percent of fragments that allocate")
    p.set_defaults(func=cmd_template)

    p = sub.add_parser("bench", parents=[common], help="run (or resume) a synthetic benchmark grid")
    p.add_argument("grid", help="grid config JSON")
    _search_flags(p)
    p.set_defaults(func=cmd_bench, out_dir="bench-out")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"heapsieve: {exc}", file=sys.stderr)
        return exc.code


def driver_main(argv=None):
    """External-driver entry point: ``heapsieve-driver PROGRAM``.

    The allocator comes from HEAPSIEVE_CONFIG (a JSON file) or
    HEAPSIEVE_PROFILE (a shipped name), defaulting to ideal.
    """
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: heapsieve-driver PROGRAM", file=sys.stderr)
        return EXIT_PARSE
    ns = argparse.Namespace(config=os.environ.get("HEAPSIEVE_CONFIG"), profile=os.environ.get("HEAPSIEVE_PROFILE"))
    try:
        config = _allocator(ns)
        _report(_run_program(_read_program(argv[0]), config))
    except CliError as exc:
        print(f"heapsieve-driver: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
