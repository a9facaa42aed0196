from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict

from domain.models import AttestationReport, RoundRecord

PRECISION = 6


def _round(value: float) -> float:
    return round(float(value), PRECISION)


class PolicyData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    f: int
    k: int
    L: int
    mode: Literal["sequential", "overlapped"]
    workers: int
    early_exit: bool


class CostModelData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    switch_us: float
    copy_us_per_kib: float
    decrypt_us_per_kib: float
    verify_us_per_mflop: float
    contention: float
    baseline_token_us: float


class RoundData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    token: int
    blocks: list[int]
    stage_us: dict[str, float]
    wer: list[Optional[float]]
    processed: list[bool]
    verdict: Literal["pass", "abort"]
    latency_us: float
    early_exit_block: Optional[int] = None


class AggregateData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rounds: int
    verdict: Literal["pass", "abort"]
    attestation_us: float
    overhead_pct: float
    evasion_analytic: float


class ReportData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    policy: PolicyData
    cost_model: CostModelData
    tokens: int
    rounds: list[RoundData]
    aggregate: AggregateData
    attack: Optional[dict] = None


def round_to_schema(record: RoundRecord) -> RoundData:
    return RoundData(
        token=record.token,
        blocks=list(record.blocks),
        stage_us={stage: _round(value) for stage, value in sorted(record.stage_us.items())},
        wer=[None if o.wer is None else _round(o.wer) for o in record.outcomes],
        processed=[o.processed for o in record.outcomes],
        verdict=record.verdict.value,
        latency_us=_round(record.latency_us),
        early_exit_block=record.early_exit_block,
    )


def report_to_schema(report: AttestationReport) -> ReportData:
    policy = report.policy
    cost = report.cost_model
    return ReportData(
        policy=PolicyData(
            f=policy.interval,
            k=policy.samples,
            L=policy.blocks,
            mode=policy.mode.value,
            workers=policy.workers,
            early_exit=policy.early_exit,
        ),
        cost_model=CostModelData(
            switch_us=cost.switch_us,
            copy_us_per_kib=cost.copy_us_per_kib,
            decrypt_us_per_kib=cost.decrypt_us_per_kib,
            verify_us_per_mflop=cost.verify_us_per_mflop,
            contention=cost.contention,
            baseline_token_us=cost.baseline_token_us,
        ),
        tokens=report.tokens,
        rounds=[round_to_schema(r) for r in report.rounds],
        aggregate=AggregateData(
            rounds=len(report.rounds),
            verdict=report.verdict.value,
            attestation_us=_round(report.attestation_us),
            overhead_pct=_round(report.overhead_pct),
            evasion_analytic=float(report.evasion_analytic),
        ),
        attack=report.attack,
    )
