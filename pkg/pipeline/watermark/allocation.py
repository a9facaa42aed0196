import math
from dataclasses import dataclass

import numpy as np

from domain.models import ActivationTrace, SignatureSpec, ToyModel, TriggerSet
from model.transformer import forward
from numkit.rng import SeededRng
from numkit.sampling import WEIGHT_FLOOR, multinomial_without_replacement


@dataclass
class ActivationProfile:
    trace: ActivationTrace
    peaks: np.ndarray
    channel_means: list[np.ndarray]


def profile_activations(model: ToyModel, trigger: TriggerSet) -> ActivationProfile:
    """Per-block peak |A_i| and per-channel mean |A_i| over the trigger set."""
    _, trace = forward(model, trigger.tokens, capture=True)
    peaks = np.array([np.max(np.abs(output)) for output in trace.outputs])
    channel_means = [np.mean(np.abs(output), axis=(0, 1)) for output in trace.outputs]
    return ActivationProfile(trace=trace, peaks=peaks, channel_means=channel_means)


def signature_shares(peak_activations, total_bits: int) -> np.ndarray:
    peaks = np.maximum(np.asarray(peak_activations, dtype=np.float64), WEIGHT_FLOOR)
    inverse = 1.0 / peaks
    return total_bits * inverse / inverse.sum()


def allocate_signature_lengths(peak_activations, total_bits: int) -> list[int]:
    """
    Signature length per block inversely proportional to its peak activation,
    rounded by largest remainder so the lengths sum to `total_bits`. Ties in the
    remainder go to the lower block index.
    """
    peaks = np.asarray(peak_activations, dtype=np.float64).ravel()
    if peaks.size == 0:
        raise ValueError("cannot allocate a signature over zero blocks")
    if total_bits < 0:
        raise ValueError(f"signature budget must be >= 0, got {total_bits}")

    shares = signature_shares(peaks, total_bits)
    lengths = np.floor(shares).astype(np.int64)
    leftover = total_bits - int(lengths.sum())
    if leftover:
        remainders = shares - lengths
        order = sorted(range(peaks.size), key=lambda i: (-remainders[i], i))
        for i in order[:leftover]:
            lengths[i] += 1
    return [int(v) for v in lengths]


def channel_count(hidden: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"channel fraction must be in (0, 1], got {fraction}")
    return min(hidden, math.ceil(round(fraction * hidden, 9)))


def select_channels(mean_abs_activation, fraction: float, rng: SeededRng) -> np.ndarray:
    """ceil(fraction*H) distinct channels, sampled with probability proportional to 1/|A_c|."""
    magnitudes = np.maximum(np.asarray(mean_abs_activation, dtype=np.float64).ravel(), WEIGHT_FLOOR)
    count = channel_count(magnitudes.size, fraction)
    picked = multinomial_without_replacement(1.0 / magnitudes, count, rng)
    return np.array(sorted(picked), dtype=np.int64)


def random_signature(lengths: list[int], rng: SeededRng) -> SignatureSpec:
    total = int(sum(lengths))
    bits = rng.integers(0, 2, size=total).astype(np.int8)
    return SignatureSpec(bits=bits, lengths=list(lengths))


@dataclass(frozen=True)
class SignatureHistogram:
    lengths: list[int]
    shares: list[float]

    def rows(self) -> list[dict]:
        return [
            {"block": i, "bits": length, "share_pct": round(share, 2)}
            for i, (length, share) in enumerate(zip(self.lengths, self.shares))
        ]


def signature_histogram(lengths: list[int]) -> SignatureHistogram:
    total = sum(lengths)
    shares = [100.0 * length / total if total else 0.0 for length in lengths]
    return SignatureHistogram(lengths=list(lengths), shares=shares)
