"""
Seeded, splittable random streams.

All randomness in kernel_lab flows from one 64-bit seed. A child stream is
derived from its parent's state and a text label:

    child_state = splitmix64(parent_state XOR fnv1a64(label))

fnv1a64 is FNV-1a over the UTF-8 bytes of the label; splitmix64 is the usual
finalizer (add golden gamma, then two xor-shift-multiply rounds and a final
xor-shift). Draws come from numpy's PCG64 seeded with the stream state:
normal = ziggurat standard_normal, uniform = random() in [0, 1),
permutation = Generator.permutation (Fisher-Yates).

Streams are single-owner. Each stream lazily creates its own generator and
successive draws advance it; split() depends only on the state, never on how
many values were already drawn, so replicate streams can be pre-split and
handed to worker threads.
"""
from typing import Optional

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def splitmix64(value: int) -> int:
    """splitmix64 output function applied to a 64-bit integer"""
    z = (value + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(label: str) -> int:
    h = FNV_OFFSET
    for byte in label.encode('utf-8'):
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def child_seed(parent_state: int, label: str) -> int:
    return splitmix64((parent_state ^ fnv1a64(label)) & MASK64)


class RngStream:
    """A labelled 64-bit random stream"""

    __slots__ = ('state', 'label', '_generator')

    def __init__(self, state: int, label: str = 'root'):
        if state < 0:
            raise ValueError(f"stream state must be a non-negative 64-bit integer, got {state}")
        self.state = int(state) & MASK64
        self.label = label
        self._generator: Optional[np.random.Generator] = None

    @classmethod
    def root(cls, seed: int) -> 'RngStream':
        return cls(splitmix64(int(seed) & MASK64), 'root')

    def split(self, label: str) -> 'RngStream':
        return RngStream(child_seed(self.state, label), f"{self.label}/{label}")

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            self._generator = np.random.Generator(np.random.PCG64(self.state))
        return self._generator

    def normal(self, n, scale: float = 1.0) -> np.ndarray:
        return scale * self.generator.standard_normal(n)

    def uniform(self, n) -> np.ndarray:
        return self.generator.random(n)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, n: int, high: int) -> np.ndarray:
        """n draws from {0, ..., high-1}"""
        return self.generator.integers(0, high, size=n)

    def __eq__(self, other) -> bool:
        return isinstance(other, RngStream) and self.state == other.state

    def __hash__(self) -> int:
        return hash(self.state)

    def __repr__(self) -> str:
        return f"RngStream(label={self.label!r}, state=0x{self.state:016x})"

