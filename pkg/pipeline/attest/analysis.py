import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from apis.schemas.config import RunConfig
from domain.models import AttestationPolicy, AttestationReport, CostModel, ModelShape, PipelineMode
from model.shapes import REFERENCE_SHAPES, ReferenceShape
from numkit.counting import InvalidCountError, log_choose_ratio
from numkit.rng import SeededRng
from pipeline.attest.scheduler import (
    COPY,
    DECRYPT,
    STAGES,
    VERIFY,
    RoundCosts,
    Schedule,
    nominal_records,
    round_costs,
    schedule_pipeline,
)

SESSION_CHUNK = 2000


# Evasion
def evasion_probability(L: int, k: int, t: int, r: int) -> float:
    """
    Chance that r independent rounds, each sampling k of L blocks uniformly,
    all miss the t tampered blocks: (C(L-t, k) / C(L, k)) ** r.
    """
    for name, value in (("L", L), ("k", k), ("t", t), ("r", r)):
        if value < 0:
            raise InvalidCountError(f"{name} must be >= 0, got {value}")
    if L < 1 or k < 1:
        raise InvalidCountError(f"need L >= 1 and k >= 1, got L={L}, k={k}")
    if t > L or k > L:
        raise InvalidCountError(f"need t <= L and k <= L, got L={L}, k={k}, t={t}")
    if t == 0 or r == 0:
        return 1.0
    if k > L - t:
        return 0.0
    return math.exp(r * log_choose_ratio(L - t, L, k))


def single_round_miss(L: int, k: int, t: int) -> float:
    return evasion_probability(L, k, t, 1)


@dataclass(frozen=True)
class EvasionEstimate:
    sessions: int
    evaded: int
    analytic: float

    @property
    def rate(self) -> float:
        return self.evaded / self.sessions if self.sessions else 0.0

    @property
    def standard_error(self) -> float:
        p = self.analytic
        return math.sqrt(p * (1.0 - p) / self.sessions) if self.sessions else 0.0

    @property
    def abs_error(self) -> float:
        return abs(self.rate - self.analytic)

    def row(self) -> dict:
        return {
            "sessions": self.sessions,
            "evaded": self.evaded,
            "empirical": round(self.rate, 6),
            "analytic": round(self.analytic, 6),
            "abs_error": round(self.abs_error, 6),
            "stderr": round(self.standard_error, 6),
        }


def _sampled_sets(rng: SeededRng, rows: int, L: int, k: int) -> np.ndarray:
    """`rows` independent uniform k-subsets of range(L), one per row."""
    return np.argsort(rng.random((rows, L)), axis=1)[:, :k]


def simulate_evasion(
    L: int, k: int, tampered, rounds: int, sessions: int, rng: SeededRng, jobs: int = 1
) -> EvasionEstimate:
    """Monte Carlo sessions of fresh uniform sampling per round; a session evades if no round hits a tampered block."""
    tampered = np.asarray(sorted(set(int(b) for b in tampered)), dtype=np.int64)
    analytic = evasion_probability(L, k, int(tampered.size), rounds)
    if sessions <= 0:
        return EvasionEstimate(sessions=0, evaded=0, analytic=analytic)

    chunks = [SESSION_CHUNK] * (sessions // SESSION_CHUNK)
    if sessions % SESSION_CHUNK:
        chunks.append(sessions % SESSION_CHUNK)
    streams = rng.spawn(len(chunks))

    def run_chunk(job) -> int:
        size, stream = job
        if rounds == 0 or tampered.size == 0:
            return size
        picks = _sampled_sets(stream, size * rounds, L, k)
        hits = np.isin(picks, tampered).any(axis=1).reshape(size, rounds)
        return int(np.sum(~hits.any(axis=1)))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        evaded = sum(pool.map(run_chunk, zip(chunks, streams)))
    return EvasionEstimate(sessions=sessions, evaded=evaded, analytic=analytic)


def security_table(f: int, m: int, t: int, shapes: dict[str, ReferenceShape] = REFERENCE_SHAPES) -> list[dict]:
    """Evasion over one conversation of m tokens, attested every f tokens, for every reference deployment."""
    if f < 1:
        raise InvalidCountError(f"interval must be >= 1, got {f}")
    rounds = m // f
    rows = []
    for name, shape in shapes.items():
        rows.append(
            {
                "model": name,
                "L": shape.blocks,
                "k": shape.attest_samples,
                "t": t,
                "rounds": rounds,
                "single_round_miss": single_round_miss(shape.blocks, shape.attest_samples, t),
                "evasion": evasion_probability(shape.blocks, shape.attest_samples, t, rounds),
            }
        )
    return rows


# Overhead
@dataclass(frozen=True)
class OverheadSummary:
    rounds: int
    attestation_us: float
    per_token_us: float
    overhead_pct: float


def overhead_pct(attestation_us: float, tokens: int, baseline_token_us: float) -> float:
    if baseline_token_us <= 0:
        raise ValueError(f"baseline per-token latency must be > 0, got {baseline_token_us}")
    if tokens <= 0:
        return 0.0
    return 100.0 * (attestation_us / tokens) / baseline_token_us


def overhead_report(report: AttestationReport, baseline_token_us: float | None = None) -> OverheadSummary:
    baseline = baseline_token_us if baseline_token_us is not None else report.cost_model.baseline_token_us
    attestation_us = report.attestation_us
    return OverheadSummary(
        rounds=len(report.rounds),
        attestation_us=attestation_us,
        per_token_us=attestation_us / report.tokens if report.tokens > 0 else 0.0,
        overhead_pct=overhead_pct(attestation_us, report.tokens, baseline),
    )


@dataclass(frozen=True)
class Deployment:
    """What the cost model needs to know about a watermarked bundle."""

    shape: ModelShape
    bits: int
    trigger_count: int
    trigger_length: int
    signature_bits: int
    channel_fraction: float

    @classmethod
    def from_config(cls, config: RunConfig, shape: ModelShape | None = None) -> "Deployment":
        shape = shape or config.model.to_shape()
        wm = config.watermark
        return cls(
            shape=shape,
            bits=wm.bits,
            trigger_count=wm.trigger_count,
            trigger_length=wm.trigger_length,
            # same per-block average as the configured budget
            signature_bits=int(round(wm.signature_bits * shape.blocks / config.model.blocks)),
            channel_fraction=wm.channel_fraction,
        )

    def nominal_costs(self, samples: int, cost_model: CostModel) -> RoundCosts:
        records = nominal_records(self.shape, self.signature_bits, self.channel_fraction, samples)
        return round_costs(self.shape, self.bits, self.trigger_count, self.trigger_length, records, cost_model)


def nominal_round(deployment: Deployment, policy: AttestationPolicy, cost_model: CostModel) -> Schedule:
    """Timeline of a passing round over k average blocks."""
    return schedule_pipeline(policy, cost_model, deployment.nominal_costs(policy.samples, cost_model))


def expected_overhead(
    deployment: Deployment, policy: AttestationPolicy, cost_model: CostModel, tokens: int
) -> OverheadSummary:
    latency = nominal_round(deployment, policy, cost_model).total_us
    rounds = policy.rounds_for(tokens)
    attestation_us = rounds * latency
    return OverheadSummary(
        rounds=rounds,
        attestation_us=attestation_us,
        per_token_us=attestation_us / tokens if tokens > 0 else 0.0,
        overhead_pct=overhead_pct(attestation_us, tokens, cost_model.baseline_token_us),
    )


def interval_sweep(
    deployment: Deployment, policy: AttestationPolicy, cost_model: CostModel, tokens: int, intervals, tampered: int = 1
) -> list[dict]:
    rows = []
    for interval in intervals:
        swept = replace(policy, interval=int(interval))
        summary = expected_overhead(deployment, swept, cost_model, tokens)
        rows.append(
            {
                "sweep": "f",
                "f": swept.interval,
                "k": swept.samples,
                "rounds": summary.rounds,
                "attestation_us": round(summary.attestation_us, 6),
                "overhead_pct": round(summary.overhead_pct, 6),
                "evasion": evasion_probability(swept.blocks, swept.samples, tampered, summary.rounds),
            }
        )
    return rows


def sample_sweep(
    deployment: Deployment, policy: AttestationPolicy, cost_model: CostModel, tokens: int, samples, tampered: int = 1
) -> list[dict]:
    rows = []
    for k in samples:
        swept = replace(policy, samples=int(k))
        summary = expected_overhead(deployment, swept, cost_model, tokens)
        rows.append(
            {
                "sweep": "k",
                "f": swept.interval,
                "k": swept.samples,
                "rounds": summary.rounds,
                "attestation_us": round(summary.attestation_us, 6),
                "overhead_pct": round(summary.overhead_pct, 6),
                "evasion": evasion_probability(swept.blocks, swept.samples, tampered, summary.rounds),
            }
        )
    return rows


def stage_breakdown(schedule: Schedule) -> dict[str, float]:
    """Share of each stage's busy time in percent; the shares sum to 100."""
    stage_us = schedule.stage_us
    total = sum(stage_us.values())
    if total <= 0:
        return {stage: 0.0 for stage in STAGES}
    return {stage: 100.0 * stage_us[stage] / total for stage in STAGES}


def breakdown_rows(schedule: Schedule) -> list[dict]:
    shares = stage_breakdown(schedule)
    return [
        {"stage": stage, "us": round(schedule.stage_us[stage], 6), "share_pct": round(shares[stage], 4)}
        for stage in STAGES
    ]


def transfer_share(schedule: Schedule) -> float:
    shares = stage_breakdown(schedule)
    return shares[COPY] + shares[DECRYPT]


@dataclass(frozen=True)
class PipelineComparison:
    sequential_us: float
    overlapped_us: float
    sequential_overhead_pct: float
    overlapped_overhead_pct: float

    @property
    def ratio(self) -> float:
        return self.overlapped_us / self.sequential_us if self.sequential_us else 1.0

    def row(self) -> dict:
        return {
            "sequential_us": round(self.sequential_us, 6),
            "overlapped_us": round(self.overlapped_us, 6),
            "ratio": round(self.ratio, 6),
            "sequential_overhead_pct": round(self.sequential_overhead_pct, 6),
            "overlapped_overhead_pct": round(self.overlapped_overhead_pct, 6),
        }


def pipeline_comparison(
    policy: AttestationPolicy, cost_model: CostModel, costs: RoundCosts, tokens: int | None = None
) -> PipelineComparison:
    """Same round with the pipeline off (sequential) and on (overlapped)."""
    sequential = schedule_pipeline(replace(policy, mode=PipelineMode.SEQUENTIAL), cost_model, costs).total_us
    overlapped = schedule_pipeline(replace(policy, mode=PipelineMode.OVERLAPPED), cost_model, costs).total_us
    tokens = tokens if tokens is not None else policy.interval
    rounds = policy.rounds_for(tokens)
    return PipelineComparison(
        sequential_us=sequential,
        overlapped_us=overlapped,
        sequential_overhead_pct=overhead_pct(rounds * sequential, tokens, cost_model.baseline_token_us),
        overlapped_overhead_pct=overhead_pct(rounds * overlapped, tokens, cost_model.baseline_token_us),
    )


def verify_share(schedule: Schedule) -> float:
    return stage_breakdown(schedule)[VERIFY]
