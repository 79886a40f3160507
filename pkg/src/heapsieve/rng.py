"""SplitMix64 streams.

Every random decision in the package is drawn from a SplitMix64 stream so
that a (seed, index) pair pins a candidate exactly, independent of platform
or of how candidates are split across workers. The compiled engine in
``_engine`` re-implements the same arithmetic and must stay in lockstep.

Integer draws use ``lo + floor(u * n)`` with ``u = (x >> 11) * 2**-53``;
both steps are exact or singly-rounded IEEE doubles, so they agree
bit-for-bit between CPython and numba.
"""

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 2.0 ** -53


def mix64(z):
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_value(seed, index):
    """Output number ``index`` (0-based) of a SplitMix64 stream seeded with ``seed``."""
    return mix64((seed + (index + 1) * GOLDEN) & MASK64)


def derive_seed(master, index):
    """Seed of sub-stream ``index`` of ``master`` (random access, order free)."""
    return stream_value(master & MASK64, index)


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed):
        self.state = seed & MASK64

    def next64(self):
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def random(self):
        return (self.next64() >> 11) * _INV53

    def randint(self, lo, hi):
        """Uniform integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + int(self.random() * (hi - lo + 1))

    def choice_index(self, n):
        return self.randint(0, n - 1)

    def weighted_index(self, weights):
        """Index drawn with probability proportional to ``weights``."""
        total = 0.0
        for w in weights:
            total += w
        target = self.random() * total
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if target < acc:
                return i
        return len(weights) - 1
