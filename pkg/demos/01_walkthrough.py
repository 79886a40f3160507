"""A small API that allocates three buffers per user, driven by hand.

create(name) allocates a 12-byte User struct, a copy of the name and a
4-byte id. Destroying users leaves holes; the next create() fills them in
a way that ends with a name copy sitting directly below another user's
struct, which is the layout an overflow of the name would need.

Run: python demos/01_walkthrough.py
"""

from heapsieve.alloc_model import AllocatorConfig, alloc, dealloc, heap_snapshot, new_heap
from heapsieve.render import render_ascii

heap = new_heap(AllocatorConfig(alignment=1, header_bytes=0, name="walkthrough"))
users = {}


def create(name):
    users[name] = (alloc(heap, 12, tag="User"), alloc(heap, len(name) + 1, tag="name"), alloc(heap, 4, tag="id"))


def destroy(name):
    for addr in users.pop(name):
        dealloc(heap, addr)


def show(label):
    blocks = [b for b in heap_snapshot(heap) if b.region == "arena"]
    holes = sorted(b.footprint for b in blocks if b.state == "free")
    print(f"{label:<22} holes={holes}")
    print(" " * 23 + render_ascii(blocks))


for n in ("charlie", "bob", "a", "eve"):
    create(n)
show("four users")
destroy("charlie")
destroy("a")
show("charlie and a gone")
create("mallory")
show("mallory created")
create("sam")
show("sam created")

sam_name, bob_user = users["sam"][1], users["bob"][0]
print(f"\nsam's name copy at {sam_name}, bob's User at {bob_user}: "
      f"{'adjacent' if sam_name + 4 == bob_user else 'not adjacent'}")
