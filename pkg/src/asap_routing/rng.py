"""Portable seeded random stream used for instance generation.

SplitMix64 (Steele, Lea & Flood 2014) is used because it is tiny, has a
fixed published reference, and yields bit-identical streams on every
platform. Derived draws:

* ``random()``  -> ``(x >> 11) * 2**-53``, a double in [0, 1)
* ``randint(lo, hi)`` -> ``lo + floor(random() * (hi - lo + 1))``
* ``uniform(lo, hi)`` -> ``lo + random() * (hi - lo)``
"""

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + self.random() * (hi - lo)

    def randint(self, lo: int, hi: int) -> int:
        """Integer uniform on the closed range [lo, hi]."""
        return lo + int(self.random() * (hi - lo + 1))
