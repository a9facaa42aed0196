import tempfile
from pathlib import Path

from apis.schemas.config import WatermarkConfig
from domain.models import AttestationPolicy, AttestationReport, CostModel
from infraestructure.logging_setup import get_logger
from numkit.rng import SeededRng
from pipeline.attacks.tamper import forge_model, write_substitute
from pipeline.attest.session_pipeline import run_session
from repo.bundle_repo import BundleRepo
from repo.key_store_repo import KEY_SIZE, KeyStoreRepo

logger = get_logger(__name__)


def adversary_key(rng: SeededRng) -> bytes:
    return rng.integers(0, 256, size=KEY_SIZE).astype("uint8").tobytes()


def forgery_attack(
    bundle_path: Path,
    key_store_path: Path,
    key: bytes,
    policy: AttestationPolicy,
    cost_model: CostModel,
    tokens: int,
    rng: SeededRng,
    config: WatermarkConfig | None = None,
    jobs: int = 1,
) -> AttestationReport:
    """
    The adversary knows the architecture and the embedding algorithm but not
    the key store. It embeds its own random signature into an unauthorized
    model; verification still uses the authentic keys.

    Three sessions are run: forged model vs authentic keys (the attack),
    forged model vs forged keys (the adversary's self-check) and the authentic
    model vs authentic keys.
    """
    repo = BundleRepo()
    victim = repo.read_layout(bundle_path)
    config = config or WatermarkConfig(bits=victim.bits)
    forged = forge_model(victim.shape, victim.bits, config, rng, jobs=jobs)

    with tempfile.TemporaryDirectory(prefix="attest-forgery-") as workdir:
        forged_bundle = Path(workdir) / Path(bundle_path).name
        write_substitute(forged.model, victim, forged_bundle, repo)

        attack = run_session(
            forged_bundle, key_store_path, key, policy, cost_model, tokens, rng=rng.child(1)
        )

        forged_key = adversary_key(rng)
        forged_keys = Path(workdir) / "forged.atks"
        KeyStoreRepo(forged_key).save(forged.key_store(victim.identity_hash), forged_keys)
        self_check = run_session(
            forged_bundle, forged_keys, forged_key, policy, cost_model, tokens, rng=rng.child(2)
        )

    authentic = run_session(bundle_path, key_store_path, key, policy, cost_model, tokens, rng=rng.child(3))

    attack.attack = {
        "kind": "forgery",
        "forged_vs_authentic": attack.verdict.value,
        "forged_vs_forged": self_check.verdict.value,
        "authentic_vs_authentic": authentic.verdict.value,
        "forged_embedding_converged": forged.all_converged,
    }
    logger.info(
        "Forgery attack: forged/authentic %s, forged/forged %s, authentic/authentic %s",
        attack.verdict.value,
        self_check.verdict.value,
        authentic.verdict.value,
    )
    return attack
