"""SplitMix64, a tiny portable generator.

Synthetic datasets use this instead of numpy's generators so that the same
seed yields the same meshes in any language that implements the algorithm.
"""

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & _MASK

    def next_u64(self):
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self, lo=0.0, hi=1.0):
        """Float in [lo, hi) from the top 53 bits."""
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def randint(self, lo, hi):
        """Integer in [lo, hi] (inclusive); modulo bias is negligible for small ranges."""
        return lo + self.next_u64() % (hi - lo + 1)


def derive_seed(seed, index):
    """Per-item seed, ``seed XOR index`` pushed through one SplitMix64 round."""
    return SplitMix64((seed ^ index) & _MASK).next_u64()
