import random

import pytest

from heapsieve.alloc_model import AllocatorConfig, profile
from heapsieve.driver import Calloc, Free, Fst, Malloc, Realloc, Snd

PROFILES = ("ideal", "avrlibc-like", "dlmalloc-like", "tcmalloc-like", "php-like")

# request sizes skewed small, with the odd page-sized and huge request
_SIZE_MIX = [(60, 1, 64), (25, 65, 600), (10, 601, 5000), (4, 5001, 70000), (1, 70001, 300000)]


def random_size(rng):
    r = rng.randrange(100)
    for weight, lo, hi in _SIZE_MIX:
        if r < weight:
            return rng.randint(lo, hi)
        r -= weight
    return 1


def random_directives(rng, n, markers=False, reallocs=True, p_free=0.4):
    """A valid random program of ``n`` directives (plus fst/snd if asked)."""
    out, live, counter = [], [], 0
    fst_at = rng.randrange(n + 1) if markers else None
    for i in range(n):
        if i == fst_at:
            out.append(Fst(random_size(rng)))
        roll = rng.random()
        if live and roll < p_free:
            j = rng.randrange(len(live))
            live[j], live[-1] = live[-1], live[j]
            out.append(Free(live.pop()))
            continue
        ident = f"x{counter}"
        counter += 1
        if reallocs and live and roll < p_free + 0.08:
            j = rng.randrange(len(live))
            live[j], live[-1] = live[-1], live[j]
            out.append(Realloc(live.pop(), random_size(rng), ident))
        elif roll > 0.95:
            out.append(Calloc(rng.randint(1, 8), rng.randint(1, 64), ident))
        else:
            out.append(Malloc(random_size(rng), ident))
        live.append(ident)
    if markers:
        if fst_at == n:
            out.append(Fst(random_size(rng)))
        out.append(Snd(random_size(rng)))
    return out


@pytest.fixture(params=PROFILES)
def any_profile(request):
    return profile(request.param)


@pytest.fixture
def ideal():
    return profile("ideal")


def walkthrough_config():
    """Best fit, LIFO lists, no rounding, no inline metadata."""
    return AllocatorConfig(alignment=1, header_bytes=0, name="walkthrough")


@pytest.fixture
def seeded():
    return random.Random(20180601)
