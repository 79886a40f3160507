"""Independent reference checks for the allocator model.

Neither helper calls into the heap's own fit or bookkeeping code: the
best-fit oracle rebuilds LIFO order from snapshot diffs, and the invariant
checker reads only the snapshot plus a few public counters.
"""

from heapsieve.alloc_model import Coalescing, SplitFrom, heap_snapshot, new_heap


def oracle_footprint(config, size):
    need = size + config.header_bytes
    a = config.alignment
    return max(a, -(-need // a) * a)


def _arena(heap):
    return [b for b in heap_snapshot(heap) if b.region == "arena"]


def best_fit_mismatches(config, ops):
    """Replay ``ops`` (("malloc", id, size) / ("free", id)) on a fresh heap,
    predicting every malloc address by exhaustive scan.

    Returns a list of (op index, predicted, actual) disagreements.
    """
    heap = new_heap(config)
    born = {}  # (offset, footprint) of a free block -> op index it appeared at
    live = {}
    bad = []
    for t, op in enumerate(ops):
        if op[0] == "malloc":
            _, ident, size = op
            fp = oracle_footprint(config, size)
            blocks = _arena(heap)
            fits = [(b.footprint, born[(b.offset, b.footprint)], b.offset) for b in blocks if b.state == "free" and b.footprint >= fp]
            if fits:
                bfp, _, off = min(fits, key=lambda f: (f[0], -f[1]))
                rem = bfp - fp
                if config.split_from is SplitFrom.END and rem >= config.min_split_remainder:
                    off += rem
            else:
                off = blocks[-1].end if blocks else 0
            want = off + config.header_bytes
            got = heap.alloc(size)
            live[ident] = got
            if got != want:
                bad.append((t, want, got))
        else:
            heap.free(live.pop(op[1]))
        free_now = {(b.offset, b.footprint) for b in _arena(heap) if b.state == "free"}
        born = {k: born.get(k, t) for k in free_now}
    return bad


def random_ops(rng, n, max_size=5000):
    ops, live, k = [], [], 0
    for _ in range(n):
        if live and rng.random() < 0.45:
            j = rng.randrange(len(live))
            live[j], live[-1] = live[-1], live[j]
            ops.append(("free", live.pop()))
        else:
            size = rng.randint(1, 128) if rng.random() < 0.7 else rng.randint(129, max_size)
            ops.append(("malloc", k, size))
            live.append(k)
            k += 1
    return ops


def invariant_violations(heap, requests=None):
    """Structural checks on the current heap; returns a list of messages.

    ``requests`` maps live addresses to the size originally requested, used
    for segregated-run purity.
    """
    cfg = heap.config
    out = []
    snap = heap_snapshot(heap)
    arena = [b for b in snap if b.region == "arena"]
    mapped = [b for b in snap if b.region == "mapped"]
    for blocks in (arena, mapped):
        for a, b in zip(blocks, blocks[1:]):
            if a.end > b.offset:
                out.append(f"overlap {a} {b}")
    # conservation: the arena is tiled exactly up to the wilderness
    pos = 0
    for b in arena:
        if b.offset != pos:
            out.append(f"gap before {b}")
        pos = b.end
    if pos != heap.wilderness:
        out.append(f"tiling ends at {pos}, wilderness {heap.wilderness}")
    if cfg.kind.value == "free-list":
        frees = [b for b in arena if b.state == "free"]
        pairs = sum(1 for a, b in zip(arena, arena[1:]) if a.state == b.state == "free")
        if cfg.coalescing is Coalescing.IMMEDIATE:
            if pairs:
                out.append(f"{pairs} adjacent free pairs under immediate coalescing")
            if frees and frees[-1].end == heap.wilderness:
                out.append("free block touching the wilderness")
        elif cfg.coalescing is Coalescing.DELAYED:
            if heap.pending >= cfg.delay_threshold:
                out.append(f"pending {heap.pending} reached threshold {cfg.delay_threshold}")
            if pairs > heap.pending:
                out.append(f"{pairs} adjacent pairs but only {heap.pending} pending")
    else:
        backed = {(b.offset, b.footprint) for b in heap.pages.snapshot() if b.state == "alloc"}
        for run in heap.runs:
            if (run.base_offset, run.span) not in backed:
                out.append(f"run at {run.base_offset} not backed by a page allocation")
        for addr, size in (requests or {}).items():
            r = cfg_route(cfg, size)
            if r.kind == "small":
                run = heap.slot_owner.get(addr)
                if run is None or run.class_size != r.size:
                    out.append(f"{size}-byte request at {addr} not in a {r.size} run")
                elif (addr - run.base_offset) % run.class_size:
                    out.append(f"slot {addr} misaligned in its run")
    return out


def cfg_route(cfg, size):
    from heapsieve.alloc_model import size_class_of

    return size_class_of(cfg, size)


def random_invariant_run(config, rng, n, check_every=1):
    """Apply ``n`` random malloc/calloc/realloc/free calls, checking the
    invariants after every ``check_every`` of them. Returns violations."""
    heap = new_heap(config)
    live = {}
    out = []
    for i in range(n):
        roll = rng.random()
        size = rng.randint(1, 128) if rng.random() < 0.75 else rng.randint(129, 40000)
        if live and roll < 0.4:
            addr = rng.choice(list(live))
            del live[addr]
            heap.free(addr)
        elif live and roll < 0.5:
            addr = rng.choice(list(live))
            del live[addr]
            live[heap.realloc(addr, size)] = size
        elif roll < 0.55:
            n_, s_ = rng.randint(1, 8), rng.randint(1, 32)
            live[heap.calloc(n_, s_)] = n_ * s_
        else:
            live[heap.alloc(size)] = size
        if i % check_every == 0 or i == n - 1:
            out += [f"op {i}: {v}" for v in invariant_violations(heap, live)]
            if len(out) > 20:
                break
    return out
