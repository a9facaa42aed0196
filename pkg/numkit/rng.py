from dataclasses import dataclass, field

import numpy as np


@dataclass
class SeededRng:
    """
    Single-owner random stream.

    PCG64 streams are platform independent, so equal seeds give bitwise-equal
    sequences everywhere. Threads must not share an instance; use `spawn`.
    """

    seed: int
    _sequence: np.random.SeedSequence = field(init=False, repr=False)
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        self._sequence = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._sequence))

    @classmethod
    def _from_sequence(cls, seed: int, sequence: np.random.SeedSequence) -> "SeededRng":
        rng = cls.__new__(cls)
        rng.seed = seed
        rng._sequence = sequence
        rng.generator = np.random.Generator(np.random.PCG64(sequence))
        return rng

    def spawn(self, n: int) -> list["SeededRng"]:
        children = self._sequence.spawn(n)
        return [SeededRng._from_sequence(self.seed, child) for child in children]

    def child(self, *key: int) -> "SeededRng":
        """Stream derived from (seed, key), independent of how many draws were made."""
        entropy = [self.seed, *key]
        return SeededRng._from_sequence(self.seed, np.random.SeedSequence(entropy))

    def normal(self, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size=size)

    def rademacher(self, size) -> np.ndarray:
        return self.generator.choice(np.array([-1, 1], dtype=np.int64), size=size)

    def sample_distinct(self, population: int, n: int) -> np.ndarray:
        return self.generator.choice(population, size=n, replace=False)

    def next_seed(self) -> int:
        return int(self.generator.integers(0, 2**63 - 1))
