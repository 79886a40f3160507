"""Find a 512-byte buffer directly below an 8-byte one by random search.

The heap starts from a synthetic interpreter start-up trace, so the naive
pair of allocations lands far apart. The search builds candidates from
allocate/free sequences of the sizes in play and stops at the first one
that yields the target distance.

Run: python demos/02_random_search.py [--profile dlmalloc-like] [--seed 0]
"""

import argparse

from heapsieve.alloc_model import footprint, profile
from heapsieve.benchgen import load_state
from heapsieve.driver import Fst, Snd, execute, serialize, DriverProgram
from heapsieve.render import render_ascii
from heapsieve.search import SearchParams, SequencePool, SimulatedExecutor, search

ap = argparse.ArgumentParser()
ap.add_argument("--profile", default="dlmalloc-like")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--budget", type=int, default=50_000)
args = ap.parse_args()

cfg = profile(args.profile)
state = load_state("php-emalloc").directives
target = -footprint(cfg, 512)

naive = execute(DriverProgram(tuple(state) + (Fst(512), Snd(8))), cfg)
print(f"{cfg.name}: target {target}, naive distance {naive.distance}")

pool = SequencePool.simple([8, 512], 512, 8, starting_state=state)
out = search(pool, SearchParams(g=args.budget, d=target, seed=args.seed), SimulatedExecutor(cfg, state))
if not out.solved:
    print(f"unsolved after {out.candidates_tried} candidates, best {out.best_distance}")
    raise SystemExit(1)

body = out.candidate.body
print(f"solved at candidate {out.candidates_to_best} ({len(body)} directives after the start-up trace):")
print(serialize(DriverProgram(tuple(body))), end="")
res = execute(out.candidate.program, cfg)
near = [b for b in res.snapshot if b.tag in ("fst", "snd")]
print("fst/snd blocks:", render_ascii(near), "distance", res.distance)
