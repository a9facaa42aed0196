import tempfile
from pathlib import Path

from apis.enclave_interface import EnclaveInterface
from apis.simulated_enclave import SimulatedEnclave
from domain.models import (
    AttestationPolicy,
    AttestationReport,
    BlockOutcome,
    CostModel,
    RoundRecord,
    TamperSpec,
    Verdict,
)
from infraestructure.logging_setup import get_logger
from numkit.rng import SeededRng
from pipeline.attacks.tamper import tampered_bundle
from pipeline.attest.analysis import evasion_probability, overhead_report
from pipeline.attest.scheduler import round_costs, schedule_pipeline
from pipeline.base_pipeline import OrchestrationPipeline

logger = get_logger(__name__)


class AttestationSession(OrchestrationPipeline):
    """
    Token-generation loop with periodic attestation.

    Every f tokens:
    1. Sample k distinct blocks uniformly, fresh each round.
    2. Copy each sampled block out of the staged region and verify it in the enclave.
    3. Lay the round out on the simulated timeline (switch, decrypt, copy, verify).
    4. Abort the session on the first round with a block below 100% WER.
    """

    def __init__(self, enclave: EnclaveInterface, policy: AttestationPolicy, cost_model: CostModel):
        if policy.blocks != enclave.layout.shape.blocks:
            raise ValueError(f"policy is for {policy.blocks} blocks, bundle has {enclave.layout.shape.blocks}")
        self.enclave = enclave
        self.policy = policy
        self.cost_model = cost_model

    def run(self, tokens: int, rng: SeededRng, tampered: int | None = None, single_round: bool = False):
        policy = self.policy
        rounds = 1 if single_round else policy.rounds_for(tokens)
        tokens = policy.interval if single_round else tokens
        report = AttestationReport(policy=policy, cost_model=self.cost_model, tokens=tokens)
        logger.info(
            "Attesting %d tokens: %d rounds, k=%d of L=%d, %s pipeline",
            tokens,
            rounds,
            policy.samples,
            policy.blocks,
            policy.mode.value,
        )

        for round_index in range(1, rounds + 1):
            record = self._round(round_index * policy.interval, rng)
            report.rounds.append(record)
            if record.verdict is Verdict.ABORT:
                logger.warning(
                    "Attestation aborted at token %d: block %s below 100%% WER (sampled %s)",
                    record.token,
                    record.early_exit_block,
                    record.blocks,
                )
                break
            logger.info("Round at token %d passed (blocks %s, %.1f us)", record.token, record.blocks, record.latency_us)

        report.overhead_pct = overhead_report(report).overhead_pct
        report.evasion_analytic = evasion_probability(
            policy.blocks, policy.samples, tampered if tampered is not None else 1, rounds
        )
        return report

    def _round(self, token: int, rng: SeededRng) -> RoundRecord:
        policy = self.policy
        blocks = sorted(int(b) for b in rng.sample_distinct(policy.blocks, policy.samples))
        trigger = self.enclave.decrypt_trigger()
        results = self.enclave.verify_blocks(blocks, workers=policy.workers)

        keys = self.enclave.key_store
        records = {b: (int(keys[b].signature.size), int(keys[b].channels.size)) for b in blocks}
        costs = round_costs(
            self.enclave.layout.shape,
            self.enclave.layout.bits,
            trigger.count,
            trigger.length,
            records,
            self.cost_model,
        )
        failing = [b for b in blocks if not results[b].passed]
        schedule = schedule_pipeline(policy, self.cost_model, costs, failing)

        processed = set(schedule.processed)
        outcomes = [
            BlockOutcome(
                block=b,
                wer=results[b].wer if b in processed else None,
                processed=b in processed,
                verify_us=schedule.verify_spent.get(b, 0.0),
            )
            for b in blocks
        ]
        verdict = Verdict.ABORT if any(b in processed for b in failing) else Verdict.PASS
        return RoundRecord(
            token=token,
            blocks=blocks,
            stage_us=schedule.stage_us,
            outcomes=outcomes,
            verdict=verdict,
            latency_us=schedule.total_us,
            early_exit_block=schedule.early_exit_block,
        )


def run_session(
    bundle_path: Path,
    key_store_path: Path,
    key: bytes,
    policy: AttestationPolicy,
    cost_model: CostModel,
    tokens: int,
    tamper: TamperSpec | None = None,
    rng: SeededRng | None = None,
    single_round: bool = False,
) -> AttestationReport:
    """
    Authenticate the key store against the bundle, then attest `tokens` generated
    tokens. A tamper spec is applied to a copy of the bundle first.
    """
    rng = rng or SeededRng(0)
    if tamper is None:
        with SimulatedEnclave(bundle_path, key_store_path, key) as enclave:
            session = AttestationSession(enclave, policy, cost_model)
            return session.run(tokens, rng, single_round=single_round)

    with tempfile.TemporaryDirectory(prefix="attest-tamper-") as workdir:
        substitute = Path(workdir) / Path(bundle_path).name
        targets = tampered_bundle(bundle_path, tamper, substitute)
        with SimulatedEnclave(substitute, key_store_path, key) as enclave:
            session = AttestationSession(enclave, policy, cost_model)
            report = session.run(tokens, rng, tampered=len(targets), single_round=single_round)
    report.attack = {"kind": tamper.kind.value, "targets": targets, "spec_sha256": tamper.spec_hash}
    return report
