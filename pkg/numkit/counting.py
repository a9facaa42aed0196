import math

from scipy.special import gammaln

EXACT_LIMIT = 64


def choose(n: int, r: int) -> int:
    """Binomial coefficient. By convention r > n gives 0."""
    _check_counts(n, r)
    if r > n:
        return 0
    return math.comb(n, r)


def log_choose(n: int, r: int) -> float:
    """Natural log of choose(n, r); -inf when r > n."""
    _check_counts(n, r)
    if r > n:
        return -math.inf
    if n <= EXACT_LIMIT:
        return math.log(math.comb(n, r))
    return float(gammaln(n + 1) - gammaln(r + 1) - gammaln(n - r + 1))


def log_choose_ratio(n_num: int, n_den: int, r: int) -> float:
    """log(C(n_num, r) / C(n_den, r)), exact rational arithmetic when both fit."""
    if r > n_num:
        return -math.inf
    if n_den <= EXACT_LIMIT:
        numerator = math.comb(n_num, r)
        denominator = math.comb(n_den, r)
        return math.log(numerator) - math.log(denominator)
    return log_choose(n_num, r) - log_choose(n_den, r)


def _check_counts(n: int, r: int) -> None:
    if n < 0 or r < 0:
        raise InvalidCountError(f"counts must be nonnegative, got n={n}, r={r}")


class InvalidCountError(ValueError):
    pass
