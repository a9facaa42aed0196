import tempfile
from dataclasses import dataclass
from pathlib import Path

from apis.simulated_enclave import SimulatedEnclave
from domain.models import AttestationPolicy, AttestationReport, CostModel, TamperKind, TamperSpec
from infraestructure.logging_setup import get_logger
from numkit.rng import SeededRng
from pipeline.attacks.tamper import tampered_bundle
from pipeline.attest.analysis import EvasionEstimate, evasion_probability, simulate_evasion
from pipeline.attest.session_pipeline import AttestationSession

logger = get_logger(__name__)

CONVERGENCE_SIZES = (1000, 10000, 20000)


@dataclass
class PartialTamperResult:
    targets: list[int]
    detectable: list[int]
    rounds: int
    estimate: EvasionEstimate
    report: AttestationReport

    def row(self) -> dict:
        return {"t": len(self.targets), "rounds": self.rounds, **self.estimate.row()}


def _detectable_blocks(enclave: SimulatedEnclave, workers: int) -> list[int]:
    """Blocks of the staged bundle that fail verification when sampled."""
    results = enclave.verify_blocks(list(range(enclave.layout.shape.blocks)), workers=workers)
    return sorted(block for block, result in results.items() if not result.passed)


def partial_tamper(
    bundle_path: Path,
    key_store_path: Path,
    key: bytes,
    spec: TamperSpec,
    policy: AttestationPolicy,
    cost_model: CostModel,
    tokens: int,
    rng: SeededRng,
    sessions: int = 20000,
    jobs: int = 1,
) -> PartialTamperResult:
    """
    Replace t blocks and measure how often whole sessions slip through.

    Every block of the tampered bundle is verified once in the enclave; the
    sessions then only replay the sampling, which is what decides detection.
    One full session is also run through the simulator for the report.
    """
    if spec.kind is not TamperKind.REPLACE_BLOCKS:
        raise ValueError(f"partial tampering replaces blocks, got {spec.kind.value}")
    rounds = policy.rounds_for(tokens)

    with tempfile.TemporaryDirectory(prefix="attest-partial-") as workdir:
        path = Path(workdir) / Path(bundle_path).name
        targets = tampered_bundle(bundle_path, spec, path)
        with SimulatedEnclave(path, key_store_path, key) as enclave:
            detectable = _detectable_blocks(enclave, policy.workers)
            report = AttestationSession(enclave, policy, cost_model).run(tokens, rng.child(0), tampered=len(targets))

    if set(detectable) != set(targets):
        logger.warning("Tampered blocks %s, blocks failing verification %s", targets, detectable)

    simulated = simulate_evasion(policy.blocks, policy.samples, detectable, rounds, sessions, rng.child(1), jobs)
    estimate = EvasionEstimate(
        sessions=simulated.sessions,
        evaded=simulated.evaded,
        analytic=evasion_probability(policy.blocks, policy.samples, len(targets), rounds),
    )
    report.attack = {
        "kind": spec.kind.value,
        "targets": targets,
        "spec_sha256": spec.spec_hash,
        **estimate.row(),
    }
    logger.info(
        "Partial tamper t=%d: %d/%d sessions evaded (%.4f, analytic %.4f)",
        len(targets),
        estimate.evaded,
        estimate.sessions,
        estimate.rate,
        estimate.analytic,
    )
    return PartialTamperResult(targets=targets, detectable=detectable, rounds=rounds, estimate=estimate, report=report)


def evasion_convergence(
    bundle_path: Path,
    key_store_path: Path,
    key: bytes,
    spec: TamperSpec,
    policy: AttestationPolicy,
    tokens: int,
    rng: SeededRng,
    sizes=CONVERGENCE_SIZES,
    jobs: int = 1,
) -> list[dict]:
    """|empirical - analytic| evasion for growing session counts, one independent stream per size."""
    rounds = policy.rounds_for(tokens)
    with tempfile.TemporaryDirectory(prefix="attest-partial-") as workdir:
        path = Path(workdir) / Path(bundle_path).name
        targets = tampered_bundle(bundle_path, spec, path)
        with SimulatedEnclave(path, key_store_path, key) as enclave:
            detectable = _detectable_blocks(enclave, policy.workers)

    analytic = evasion_probability(policy.blocks, policy.samples, len(targets), rounds)
    rows = []
    for size in sizes:
        simulated = simulate_evasion(
            policy.blocks, policy.samples, detectable, rounds, int(size), rng.child(2, int(size)), jobs
        )
        estimate = EvasionEstimate(sessions=simulated.sessions, evaded=simulated.evaded, analytic=analytic)
        rows.append({"t": len(targets), "rounds": rounds, **estimate.row()})
    return rows
