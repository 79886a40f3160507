"""Solve the shipped adjacency template with the shipped fragment set.

The template wants a 32-byte buffer directly below a 64-byte one. As
written, the 64-byte buffer reuses the hole left by a freed 4096-byte setup
buffer and ends up 4096 bytes away. The HEAP-MANIP point lets the search
splice in fragments that allocate or free 32- and 64-byte buffers.

Run: python demos/04_template.py
"""

from importlib import resources

from heapsieve.alloc_model import profile
from heapsieve.driver import execute, serialize
from heapsieve.template import load_fragment_db, parse_template, template_search

data = resources.files("heapsieve.data")
text = data.joinpath("templates", "adjacency.tpl").read_text()
print(text)
tpl = parse_template(text)
db = load_fragment_db(data.joinpath("fragments"))
print(f"{len(db.fragments)} fragments loaded")

cfg = profile("ideal")
out = template_search(tpl, db, g=50_000, seed=0, config=cfg)
print(f"solved={out.solved} after {out.candidates_tried} candidates")
if out.solved:
    print(serialize(out.best_candidate), end="")
    for x, y, obs, req in execute(out.best_candidate, cfg).checks:
        print(f"check {x} -> {y}: observed {obs}, required {req}")
