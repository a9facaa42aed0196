from collections.abc import Callable

import numpy as np


def spsa_estimate(
    loss_fn: Callable[[np.ndarray], float], point: np.ndarray, direction: np.ndarray, mu: float
) -> tuple[np.ndarray, float, float]:
    """
    Two-sided simultaneous-perturbation gradient estimate along `direction`.

    Returns (estimate, loss at point + mu*direction, loss at point - mu*direction).
    """
    if mu <= 0:
        raise ValueError(f"perturbation strength must be positive, got {mu}")
    loss_plus = float(loss_fn(point + mu * direction))
    loss_minus = float(loss_fn(point - mu * direction))
    estimate = (loss_plus - loss_minus) / (2.0 * mu) * direction
    return estimate, loss_plus, loss_minus
