"""SplitMix64: the generator behind every randomized workload.

Chosen because its whole state is one 64-bit word and its output is fully
specified, so any reimplementation reproduces the same workloads.
"""

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed=0):
        self.state = seed & MASK64

    def next_u64(self):
        self.state = z = (self.state + GOLDEN) & MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n):
        """Uniform integer in [0, n), by rejection."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = MASK64 - (MASK64 + 1) % n
        while True:
            x = self.next_u64()
            if x <= limit:
                return x % n

    def random(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def fork(self):
        return SplitMix64(self.next_u64())
