import numpy as np

from numkit.rng import SeededRng

WEIGHT_FLOOR = 1e-12


def multinomial_without_replacement(weights, n: int, rng: SeededRng) -> list[int]:
    """
    Draw `n` distinct indices, each draw proportional to the remaining weights.

    Weights are floored at 1e-12 so dead entries stay drawable.
    """
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if n < 0 or n > weights.size:
        raise SamplingError(n, weights.size)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("sampling weights must be finite and nonnegative")
    if n == 0:
        return []

    floored = np.maximum(weights, WEIGHT_FLOOR)
    probabilities = floored / floored.sum()
    drawn = rng.generator.choice(weights.size, size=n, replace=False, p=probabilities)
    return [int(i) for i in drawn]


class SamplingError(ValueError):
    def __init__(self, n: int, population: int):
        super().__init__(f"cannot draw {n} distinct items from a population of {population}")
        self.n = n
        self.population = population
