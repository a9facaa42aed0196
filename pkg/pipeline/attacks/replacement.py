import tempfile
from pathlib import Path

import numpy as np

from apis.schemas.config import WatermarkConfig
from apis.simulated_enclave import SimulatedEnclave
from domain.models import (
    AttestationPolicy,
    AttestationReport,
    CostModel,
    ModelShape,
    QuantizedModel,
    WatermarkKey,
)
from infraestructure.logging_setup import get_logger
from model.transformer import forward, init_model, synthetic_tokens
from numkit.rng import SeededRng
from pipeline.attacks.tamper import ArchitectureMismatchError, write_substitute
from pipeline.attest.session_pipeline import AttestationSession
from pipeline.watermark.embed_pipeline import as_checkpoint
from pipeline.watermark.pre_quant_pipeline import PreQuantStage
from quant.quantizer import quantize_model
from repo.bundle_repo import BundleRepo

logger = get_logger(__name__)

PROXY_BITS = 8
PROXY_CHANNELS = 8


def build_substitute(
    shape: ModelShape, bits: int, rng: SeededRng, proxy_steps: int = 3, config: WatermarkConfig | None = None
) -> QuantizedModel:
    """
    Stand-in for an independently trained model: a fresh initialization moved
    by a few gradient steps on an objective of its own, unrelated to any key.
    """
    config = config or WatermarkConfig()
    model = init_model(shape, SeededRng(rng.next_seed()))
    if proxy_steps > 0:
        tokens = synthetic_tokens(rng, config.trigger_count, config.trigger_length, shape.vocab)
        _, trace = forward(model, tokens, capture=True)
        stage = PreQuantStage(
            alpha=config.alpha, lr=config.pre_lr, epochs=proxy_steps, projection_lr=config.projection_lr
        )
        channels_count = min(PROXY_CHANNELS, shape.hidden)
        for index, block in enumerate(model.blocks):
            channels = np.sort(rng.sample_distinct(shape.hidden, channels_count))
            proxy = WatermarkKey(
                block_index=index,
                projection=rng.normal(1.0, (PROXY_BITS, channels_count)),
                channels=channels,
                signature=rng.integers(0, 2, size=PROXY_BITS),
                checkpoint=as_checkpoint(trace.previous(index)),
            )
            model.blocks[index] = stage.run(block, proxy, proxy.checkpoint).block
    return quantize_model(model, bits)


def wer_summary(wers: dict[int, float]) -> dict:
    values = np.array(list(wers.values()), dtype=np.float64)
    return {
        "per_block_wer": {str(block): round(wer, 6) for block, wer in sorted(wers.items())},
        "mean_wer": round(float(values.mean()), 6) if values.size else 100.0,
        "min_wer": round(float(values.min()), 6) if values.size else 100.0,
        "blocks_below_100": int(np.sum(values < 100.0)),
    }


def replacement_attack(
    bundle_path: Path,
    key_store_path: Path,
    key: bytes,
    policy: AttestationPolicy,
    cost_model: CostModel,
    tokens: int,
    rng: SeededRng,
    substitute: QuantizedModel | None = None,
    proxy_steps: int = 3,
    config: WatermarkConfig | None = None,
) -> AttestationReport:
    """
    Host a same-architecture model with different parameters behind the
    victim's bundle header and attest it against the victim's key store.
    """
    repo = BundleRepo()
    victim = repo.read_layout(bundle_path)
    if substitute is None:
        substitute = build_substitute(victim.shape, victim.bits, rng, proxy_steps, config)
    elif substitute.shape != victim.shape:
        raise ArchitectureMismatchError(victim.shape, substitute.shape)

    with tempfile.TemporaryDirectory(prefix="attest-replacement-") as workdir:
        path = Path(workdir) / Path(bundle_path).name
        write_substitute(substitute, victim, path, repo)
        with SimulatedEnclave(path, key_store_path, key) as enclave:
            results = enclave.verify_blocks(list(range(victim.shape.blocks)), workers=policy.workers)
            report = AttestationSession(enclave, policy, cost_model).run(tokens, rng, tampered=victim.shape.blocks)

    summary = wer_summary({block: result.wer for block, result in results.items()})
    report.attack = {"kind": "replacement", "verdict": report.verdict.value, **summary}
    logger.info("Replacement attack: mean WER %.2f%%, verdict %s", summary["mean_wer"], report.verdict.value)
    return report
