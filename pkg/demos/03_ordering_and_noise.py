"""How allocation order and noise change the odds, on a few grid cells.

Natural cells allocate the buffers in the order that front-splitting
allocators place them anyway; reversed cells fight that. Noise adds
same-size allocations around each buffer. This prints a small table from
a slice of the benchmark grid at a reduced budget.

Run: python demos/03_ordering_and_noise.py [--budget 5000]
"""

import argparse

from heapsieve.benchgen import aggregate, generate_grid, run_experiment

ap = argparse.ArgumentParser()
ap.add_argument("--budget", type=int, default=5000)
ap.add_argument("--profile", default="dlmalloc-like")
args = ap.parse_args()

specs = generate_grid(sizes=(8, 64, 512), noises=(0, 1, 4), profiles=(args.profile,), states=("php-emalloc",))
results = []
for s in specs:
    r = run_experiment(s, g=args.budget)
    results.append(r)
    print(f"{s.key:<55} {s.relationship.value:<9} {'solved' if r.solved else '-'}", flush=True)

print("\nnoise  overall  natural  reversed")
for row in aggregate(results):
    print(f"{row.noise:>5}  {row.pct_overall:>7}  {row.pct_natural:>7}  {row.pct_reversed:>8}")
