import numpy as np


def as_matrix(values, dtype=np.float64) -> np.ndarray:
    array = np.ascontiguousarray(values, dtype=dtype)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    return array


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Dense product of the last two axes of `a` and `b`.

    Leading axes broadcast the way `np.matmul` does. Inputs are made C-contiguous
    float64 first so the accumulation order only depends on the shapes.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    out = np.matmul(a, b)
    ensure_finite(out, "matmul")
    return out


def ensure_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(where)


class ShapeMismatchError(ValueError):
    def __init__(self, op: str, left: tuple, right: tuple):
        super().__init__(f"{op}: incompatible shapes {tuple(left)} and {tuple(right)}")
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)


class NonFiniteValueError(ValueError):
    def __init__(self, where: str):
        super().__init__(f"{where}: produced NaN or Inf")
        self.where = where
