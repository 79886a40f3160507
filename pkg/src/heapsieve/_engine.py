"""Compiled batch evaluator for the search loop.

The reference heaps in ``alloc_model`` are dict-based and too slow for
50,000-candidate searches with 1000-sequence candidates. This module mirrors
their semantics on flat numpy arrays under numba: candidate generation
(same SplitMix64 draws as ``search.construct_candidate``) and execution are
fused, and each candidate starts from a copy of the starting-state heap.

Supported: best-fit free lists (front/end split, immediate/delayed/never
coalescing, headers, mapped large allocations) and segregated storage over a
best-fit page heap. Anything else falls back to the Python path. The test
suite checks candidate-by-candidate agreement with the reference.

Free-list records are rows of ``bi``; physical neighbours are doubly linked
in offset order, and each free size bin is a doubly linked LIFO list whose
head (newest) is kept in ``szh`` next to the ascending size array ``szv``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .alloc_model import Coalescing, FitPolicy, FreeListHeap, Kind, SegregatedHeap, SplitFrom, new_heap, size_class_of
from .driver import run_directives
from .rng import GOLDEN, MASK64

# record columns
OFF, SIZE, FREE, PP, PN, BP, BN = range(7)
# scalar slots
NREC, FREC, FIRST, TOP, WILD, PEND, NSZ, MAPCUR, CAP, MINSPLIT, MODE, THRESH, FRONT = range(13)
NSCALARS = 13
# route kinds
R_HEAP, R_SMALL, R_MAPPED = 0, 1, 3

FAILED = np.iinfo(np.int64).min

_G = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 2.0 ** -53


@njit(cache=True, _nrt=False)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, _nrt=False)
def _randint(st, lo, hi):
    st[0] = st[0] + _G
    x = _mix(st[0])
    u = np.float64(x >> np.uint64(11)) * _INV53
    return lo + np.int64(u * np.float64(hi - lo + 1))


@njit(cache=True, _nrt=False)
def _pick(st, n):
    if n == 1:
        return 0
    return _randint(st, 0, n - 1)


# -- free-list heap on arrays -------------------------------------------------


@njit(cache=True, _nrt=False)
def _szfind(szv, nsz, s):
    lo, hi = 0, nsz
    while lo < hi:
        mid = (lo + hi) >> 1
        if szv[mid] < s:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, _nrt=False)
def _bin_push(bi, sc, szv, szh, r):
    s = bi[r, SIZE]
    nsz = sc[NSZ]
    k = _szfind(szv, nsz, s)
    bi[r, FREE] = 1
    bi[r, BP] = -1
    if k < nsz and szv[k] == s:
        old = szh[k]
        bi[r, BN] = old
        bi[old, BP] = r
        szh[k] = r
        return
    for j in range(nsz, k, -1):
        szv[j] = szv[j - 1]
        szh[j] = szh[j - 1]
    szv[k] = s
    szh[k] = r
    bi[r, BN] = -1
    sc[NSZ] = nsz + 1


@njit(cache=True, _nrt=False)
def _bin_remove(bi, sc, szv, szh, r):
    nsz = sc[NSZ]
    k = _szfind(szv, nsz, bi[r, SIZE])
    p, n = bi[r, BP], bi[r, BN]
    if p >= 0:
        bi[p, BN] = n
    else:
        szh[k] = n
    if n >= 0:
        bi[n, BP] = p
    bi[r, FREE] = 0
    if szh[k] < 0:
        for j in range(k, nsz - 1):
            szv[j] = szv[j + 1]
            szh[j] = szh[j + 1]
        sc[NSZ] = nsz - 1


@njit(cache=True, _nrt=False)
def _new_rec(bi, sc):
    r = sc[FREC]
    if r >= 0:
        sc[FREC] = bi[r, PN]
    else:
        r = sc[NREC]
        sc[NREC] = r + 1
    return r


@njit(cache=True, _nrt=False)
def _drop_rec(bi, sc, r):
    """Unlink ``r`` from the physical list and recycle it."""
    p, n = bi[r, PP], bi[r, PN]
    if p >= 0:
        bi[p, PN] = n
    else:
        sc[FIRST] = n
    if n >= 0:
        bi[n, PP] = p
    else:
        sc[TOP] = p
    bi[r, PN] = sc[FREC]
    sc[FREC] = r


@njit(cache=True, _nrt=False)
def _place(bi, sc, szv, szh, fp):
    """Reserve ``fp`` bytes; returns the record index or -1 when exhausted."""
    nsz = sc[NSZ]
    k = _szfind(szv, nsz, fp)
    if k == nsz:
        off = sc[WILD]
        if off + fp > sc[CAP]:
            return -1
        r = _new_rec(bi, sc)
        bi[r, OFF] = off
        bi[r, SIZE] = fp
        bi[r, FREE] = 0
        t = sc[TOP]
        bi[r, PP] = t
        bi[r, PN] = -1
        if t >= 0:
            bi[t, PN] = r
        else:
            sc[FIRST] = r
        sc[TOP] = r
        sc[WILD] = off + fp
        return r
    r = szh[k]
    _bin_remove(bi, sc, szv, szh, r)
    rem = bi[r, SIZE] - fp
    if rem >= sc[MINSPLIT]:
        q = _new_rec(bi, sc)
        bi[q, SIZE] = rem
        if sc[FRONT]:
            bi[q, OFF] = bi[r, OFF] + fp
            n = bi[r, PN]
            bi[q, PP] = r
            bi[q, PN] = n
            bi[r, PN] = q
            if n >= 0:
                bi[n, PP] = q
            else:
                sc[TOP] = q
        else:
            bi[q, OFF] = bi[r, OFF]
            bi[r, OFF] += rem
            p = bi[r, PP]
            bi[q, PN] = r
            bi[q, PP] = p
            bi[r, PP] = q
            if p >= 0:
                bi[p, PN] = q
            else:
                sc[FIRST] = q
        bi[r, SIZE] = fp
        _bin_push(bi, sc, szv, szh, q)
    return r


@njit(cache=True, _nrt=False)
def _coalesce_all(bi, sc, szv, szh):
    x = sc[FIRST]
    while x >= 0:
        y = bi[x, PN]
        if bi[x, FREE] == 1 and y >= 0 and bi[y, FREE] == 1:
            _bin_remove(bi, sc, szv, szh, x)
            while y >= 0 and bi[y, FREE] == 1:
                _bin_remove(bi, sc, szv, szh, y)
                bi[x, SIZE] += bi[y, SIZE]
                n = bi[y, PN]
                _drop_rec(bi, sc, y)
                y = n
            _bin_push(bi, sc, szv, szh, x)
        x = bi[x, PN]
    sc[PEND] = 0


@njit(cache=True, _nrt=False)
def _release(bi, sc, szv, szh, r):
    mode = sc[MODE]
    if mode == 0:
        n = bi[r, PN]
        if n >= 0 and bi[n, FREE] == 1:
            _bin_remove(bi, sc, szv, szh, n)
            bi[r, SIZE] += bi[n, SIZE]
            _drop_rec(bi, sc, n)
        p = bi[r, PP]
        if p >= 0 and bi[p, FREE] == 1:
            _bin_remove(bi, sc, szv, szh, p)
            bi[p, SIZE] += bi[r, SIZE]
            _drop_rec(bi, sc, r)
            r = p
        if bi[r, OFF] + bi[r, SIZE] == sc[WILD]:
            sc[WILD] = bi[r, OFF]
            _drop_rec(bi, sc, r)
        else:
            _bin_push(bi, sc, szv, szh, r)
        return
    if mode == 1:
        n, p = bi[r, PN], bi[r, PP]
        if n >= 0 and bi[n, FREE] == 1:
            sc[PEND] += 1
        if p >= 0 and bi[p, FREE] == 1:
            sc[PEND] += 1
    _bin_push(bi, sc, szv, szh, r)
    if mode == 1 and sc[PEND] >= sc[THRESH]:
        _coalesce_all(bi, sc, szv, szh)


# -- fused generate + execute ---------------------------------------------------


@njit(cache=True, _nrt=False)
def _alloc(route, val, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, ident):
    """Perform one allocation; returns its address or -1 on exhaustion."""
    if route == R_HEAP:
        r = _place(bi, sc, szv, szh, val)
        if r < 0:
            return -1
        hk[ident] = R_HEAP
        hv[ident] = r
        return bi[r, OFF] + header
    if route == R_SMALL:
        c = val
        if stkn[c] == 0:
            r = _place(bi, sc, szv, szh, cls_span[c])
            if r < 0:
                return -1
            base = bi[r, OFF]
            cs = cls_size[c]
            cnt = cls_span[c] // cs
            for i in range(cnt - 1, -1, -1):
                stk[c, stkn[c]] = base + i * cs
                stkn[c] += 1
        stkn[c] -= 1
        off = stk[c, stkn[c]]
        hk[ident] = R_SMALL
        hv[ident] = off
        return off
    off = sc[MAPCUR]
    sc[MAPCUR] = off + val
    hk[ident] = R_MAPPED
    hv[ident] = off
    return off + header


@njit(cache=True, _nrt=False)
def _dealloc(ident, bi, sc, szv, szh, stk, stkn, hk, hv, hc):
    k = hk[ident]
    if k == R_HEAP:
        _release(bi, sc, szv, szh, hv[ident])
    elif k == R_SMALL:
        c = hc[ident]
        stk[c, stkn[c]] = hv[ident]
        stkn[c] += 1


@njit(cache=True, _nrt=False)
def _emit(q, seqs, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, hc, counter):
    """Noise allocations of sequence row ``q``; returns the new counter or -1."""
    nk, nv = seqs[q, 4], seqs[q, 5]
    for _ in range(seqs[q, 2]):
        if _alloc(nk, nv, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, counter) < 0:
            return -1
        counter += 1
    return counter


@njit(cache=True, _nrt=False)
def _emit_after(q, seqs, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, hc, counter):
    nk, nv = seqs[q, 4], seqs[q, 5]
    for _ in range(seqs[q, 3]):
        if _alloc(nk, nv, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, counter) < 0:
            return -1
        counter += 1
    return counter


@njit(cache=True, _nrt=False)
def run_batch(
    seed, start, stop, target, m, r_pct,
    base_bi, base_sc, base_szv, base_szh, base_stk, base_stkn,
    bi, sc, szv, szh, stk, stkn,
    cls_size, cls_span, header,
    seqs, aoff, acnt, foff, fcnt, fst_row, snd_row,
    hk, hv, hc, live, liven, st, out, dists, record,
):
    """Evaluate candidates [start, stop).

    ``out`` receives (solved index, best index, best distance, failures, stop);
    indices are -1 when absent. With ``record`` set, ``dists`` holds each
    candidate's distance (FAILED for failures).
    """
    nsizes = aoff.shape[0]
    ncls = base_stkn.shape[0]
    best_err = -1
    out[0] = -1
    out[1] = -1
    out[2] = 0
    out[3] = 0
    out[4] = stop
    nrec = base_sc[NREC]
    nsz = base_sc[NSZ]
    for i in range(start, stop):
        # fresh copy of the starting-state heap
        for k in range(nrec):
            for j in range(7):
                bi[k, j] = base_bi[k, j]
        for k in range(NSCALARS):
            sc[k] = base_sc[k]
        for k in range(nsz):
            szv[k] = base_szv[k]
            szh[k] = base_szh[k]
        for c in range(ncls):
            n = base_stkn[c]
            stkn[c] = n
            for k in range(n):
                stk[c, k] = base_stk[c, k]
        for s in range(nsizes):
            liven[s] = 0
        st[0] = _mix(np.uint64(seed) + np.uint64(i + 1) * _G)

        n = _randint(st, 1, m)
        fst_slot = _randint(st, 0, n - 1)
        counter = 0
        failed = False
        addr_fst = 0
        addr_snd = 0
        for slot in range(n + 1):
            if slot == n or slot == fst_slot:
                q = snd_row if slot == n else fst_row
                counter = _emit(q, seqs, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, hc, counter)
                if counter < 0:
                    failed = True
                    break
                a = _alloc(seqs[q, 0], seqs[q, 1], bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, counter)
                if a < 0:
                    failed = True
                    break
                counter += 1
                if slot == n:
                    addr_snd = a
                else:
                    addr_fst = a
                counter = _emit_after(q, seqs, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, hc, counter)
                if counter < 0:
                    failed = True
                    break
                continue
            target_id = -1
            if _randint(st, 1, 100) <= r_pct:
                s = _pick(st, nsizes)
                q = aoff[s] + _pick(st, acnt[s])
            else:
                s = _pick(st, nsizes)
                if liven[s] == 0:
                    q = aoff[s] + _pick(st, acnt[s])
                else:
                    j = _randint(st, 0, liven[s] - 1)
                    last = liven[s] - 1
                    target_id = live[s, j]
                    live[s, j] = live[s, last]
                    liven[s] = last
                    q = foff[s] + _pick(st, fcnt[s])
            counter = _emit(q, seqs, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, hc, counter)
            if counter < 0:
                failed = True
                break
            if target_id >= 0:
                _dealloc(target_id, bi, sc, szv, szh, stk, stkn, hk, hv, hc)
            else:
                hc[counter] = seqs[q, 1]
                if _alloc(seqs[q, 0], seqs[q, 1], bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, counter) < 0:
                    failed = True
                    break
                live[s, liven[s]] = counter
                liven[s] += 1
                counter += 1
            counter = _emit_after(q, seqs, bi, sc, szv, szh, stk, stkn, cls_size, cls_span, header, hk, hv, hc, counter)
            if counter < 0:
                failed = True
                break
        if failed:
            out[3] += 1
            if record:
                dists[i - start] = FAILED
            continue
        dist = addr_fst - addr_snd
        if record:
            dists[i - start] = dist
        err = abs(dist - target)
        if best_err < 0 or err < best_err:
            best_err = err
            out[1] = i
            out[2] = dist
        if err == 0:
            out[0] = i
            out[4] = i + 1
            break


# -- Python side ------------------------------------------------------------------


def _export_freelist(heap: FreeListHeap, nrec_cap):
    cfg = heap.config
    blocks = sorted([(o, fp, 0) for o, fp in heap.used.items()] + [(o, fp, 1) for o, fp in heap.free_blocks.items()])
    bi = np.full((nrec_cap, 7), -1, dtype=np.int64)
    index = {}
    for k, (o, fp, free) in enumerate(blocks):
        bi[k, OFF], bi[k, SIZE], bi[k, FREE] = o, fp, free
        bi[k, PP] = k - 1
        bi[k, PN] = k + 1 if k + 1 < len(blocks) else -1
        index[o] = k
    szv = np.zeros(nrec_cap, dtype=np.int64)
    szh = np.full(nrec_cap, -1, dtype=np.int64)
    for j, fp in enumerate(heap.sizes):
        order = [index[o] for o in heap.bins[fp]]  # oldest first
        newest_first = order[::-1]
        szv[j], szh[j] = fp, newest_first[0]
        for a, rec in enumerate(newest_first):
            bi[rec, BP] = newest_first[a - 1] if a else -1
            bi[rec, BN] = newest_first[a + 1] if a + 1 < len(newest_first) else -1
    sc = np.zeros(NSCALARS, dtype=np.int64)
    sc[NREC] = len(blocks)
    sc[FREC] = -1
    sc[FIRST] = 0 if blocks else -1
    sc[TOP] = len(blocks) - 1
    sc[WILD] = heap.wilderness
    sc[PEND] = heap.pending
    sc[NSZ] = len(heap.sizes)
    sc[MAPCUR] = heap.mapped_cursor
    sc[CAP] = cfg.capacity
    sc[MINSPLIT] = cfg.min_split_remainder
    sc[MODE] = {Coalescing.IMMEDIATE: 0, Coalescing.DELAYED: 1, Coalescing.NEVER: 2}[cfg.coalescing]
    sc[THRESH] = cfg.delay_threshold
    sc[FRONT] = int(cfg.split_from is SplitFrom.FRONT)
    return bi, sc, szv, szh


class Engine:
    """Batch evaluator bound to one allocator config and starting state."""

    def __init__(self, config, heap):
        self.config = config
        self.heap = heap
        self.seg = isinstance(heap, SegregatedHeap)
        self.classes = list(config.size_classes) if self.seg else []
        self._pool_key = None
        self._pool_arrays = None

    @classmethod
    def build(cls, config, prefix):
        if config.kind is Kind.FREE_LIST and config.fit_policy is not FitPolicy.BEST_FIT:
            return None
        heap = new_heap(config)
        run_directives(heap, prefix, {})
        return cls(config, heap)

    def supports(self, pool):
        return all(s.primary_size >= 1 for s in self._all_sequences(pool))

    @staticmethod
    def _all_sequences(pool):
        for seqs in list(pool.alloc.values()) + list(pool.free.values()):
            yield from seqs
        yield pool.fst
        yield pool.snd

    def _route(self, size):
        r = size_class_of(self.config, size)
        if r.kind == "small":
            return R_SMALL, self.classes.index(r.size)
        if r.kind == "mapped":
            return R_MAPPED, r.size
        return R_HEAP, r.size

    def _encode_pool(self, pool):
        key = id(pool)
        if self._pool_key == key and self._pool_arrays[0] is pool:
            return self._pool_arrays[1]
        rows = []

        def row(seq):
            pk, pv = self._route(seq.primary_size)
            nk, nv = self._route(seq.noise_size) if seq.noise_count else (R_HEAP, 0)
            rows.append((pk, pv, seq.noise_before, seq.noise_after, nk, nv))
            return len(rows) - 1

        sizes = pool.sizes
        aoff = np.zeros(len(sizes), dtype=np.int64)
        acnt = np.zeros(len(sizes), dtype=np.int64)
        foff = np.zeros(len(sizes), dtype=np.int64)
        fcnt = np.zeros(len(sizes), dtype=np.int64)
        for k, s in enumerate(sizes):
            aoff[k] = len(rows)
            acnt[k] = len(pool.alloc[s])
            for seq in pool.alloc[s]:
                row(seq)
            foff[k] = len(rows)
            fcnt[k] = len(pool.free[s])
            for seq in pool.free[s]:
                row(seq)
        fst_row = row(pool.fst)
        snd_row = row(pool.snd)
        seqs = np.array(rows, dtype=np.int64)
        max_noise = int(max(seqs[:, 2] + seqs[:, 3]))
        enc = (seqs, aoff, acnt, foff, fcnt, fst_row, snd_row, max_noise)
        self._pool_key = key
        self._pool_arrays = (pool, enc)
        return enc

    def _buffers(self, enc, params):
        seqs, aoff, acnt, foff, fcnt, fst_row, snd_row, max_noise = enc
        max_allocs = (params.m + 1) * (1 + max_noise) + 2
        if self.seg:
            pages = self.heap.pages
        else:
            pages = self.heap
        nrec = len(pages.used) + len(pages.free_blocks) + 2 * max_allocs + 8
        base_bi, base_sc, base_szv, base_szh = _export_freelist(pages, nrec)
        header = self.config.header_bytes if not self.seg else 0
        ncls = max(1, len(self.classes))
        cls_size = np.ones(ncls, dtype=np.int64)
        cls_span = np.ones(ncls, dtype=np.int64)
        base_stkn = np.zeros(ncls, dtype=np.int64)
        stacks = []
        if self.seg:
            base_sc[MAPCUR] = self.heap.mapped_cursor
            for c, size in enumerate(self.classes):
                cls_size[c] = size
                cls_span[c] = self.heap.run_span(size)
                stacks.append([o for o, _ in self.heap.stacks[size]])
                base_stkn[c] = len(stacks[-1])
        cap = max([len(s) for s in stacks] + [0]) + int(max(cls_span // cls_size)) + max_allocs + 1
        base_stk = np.zeros((ncls, cap), dtype=np.int64)
        for c, s in enumerate(stacks):
            base_stk[c, : len(s)] = s
        nsizes = len(aoff)
        work = dict(
            bi=np.empty_like(base_bi),
            sc=np.empty_like(base_sc),
            szv=np.empty_like(base_szv),
            szh=np.empty_like(base_szh),
            stk=np.empty_like(base_stk),
            stkn=np.empty_like(base_stkn),
            hk=np.zeros(max_allocs, dtype=np.int64),
            hv=np.zeros(max_allocs, dtype=np.int64),
            hc=np.zeros(max_allocs, dtype=np.int64),
            live=np.zeros((nsizes, params.m + 1), dtype=np.int64),
            liven=np.zeros(nsizes, dtype=np.int64),
        )
        base = (base_bi, base_sc, base_szv, base_szh, base_stk, base_stkn)
        return base, work, (cls_size, cls_span, header)

    def _run(self, pool, params, start, stop, record):
        enc = self._encode_pool(pool)
        base, w, (cls_size, cls_span, header) = self._buffers(enc, params)
        seqs, aoff, acnt, foff, fcnt, fst_row, snd_row, _ = enc
        out = np.zeros(5, dtype=np.int64)
        dists = np.zeros(max(0, stop - start) if record else 1, dtype=np.int64)
        run_batch(
            np.uint64(params.seed & MASK64), start, stop, params.d, params.m, params.r,
            *base,
            w["bi"], w["sc"], w["szv"], w["szh"], w["stk"], w["stkn"],
            cls_size, cls_span, header,
            seqs, aoff, acnt, foff, fcnt, fst_row, snd_row,
            w["hk"], w["hv"], w["hc"], w["live"], w["liven"], np.zeros(1, dtype=np.uint64), out, dists, record,
        )
        return out, dists

    def batch(self, pool, params, start, stop):
        from .search import ChunkResult

        out, _ = self._run(pool, params, start, stop, False)
        res = ChunkResult(start, int(out[4]))
        res.solved_index = None if out[0] < 0 else int(out[0])
        res.best_index = None if out[1] < 0 else int(out[1])
        res.best_distance = None if out[1] < 0 else int(out[2])
        res.best_error = None if out[1] < 0 else abs(res.best_distance - params.d)
        res.failures = int(out[3])
        return res

    def distances(self, pool, params, start, stop):
        """Per-candidate distances (None for failures); used by tests."""
        _, dists = self._run(pool, params, start, stop, True)
        return [None if v == FAILED else int(v) for v in dists]
