from pathlib import Path

import numpy as np

from apis.schemas.config import WatermarkConfig
from domain.models import (
    WEIGHT_NAMES,
    ModelShape,
    QuantizedBlock,
    QuantizedModel,
    TamperKind,
    TamperSpec,
)
from infraestructure.logging_setup import get_logger
from model.transformer import init_block, init_model
from numkit.rng import SeededRng
from pipeline.watermark.embed_pipeline import EmbeddingResult, WatermarkEmbeddingPipeline, make_trigger_set
from quant.quantizer import dequantize_block, quantize_block, quantize_tensor
from repo.bundle_repo import BundleLayout, BundleRepo

logger = get_logger(__name__)


def fresh_block(shape: ModelShape, bits: int, rng: SeededRng) -> QuantizedBlock:
    return quantize_block(init_block(shape.hidden, shape.ffn, shape.heads, rng), bits)


def noisy_block(qblock: QuantizedBlock, sigma: float, rng: SeededRng) -> QuantizedBlock:
    """Gaussian noise of sigma times each weight tensor's own standard deviation, then re-quantized."""
    block = dequantize_block(qblock)
    qweights, scales = {}, {}
    for name in WEIGHT_NAMES:
        weights = getattr(block, name)
        noisy = weights + rng.normal(sigma * float(np.std(weights)), weights.shape)
        qweights[name], scales[name] = quantize_tensor(noisy, qblock.bits)
    return QuantizedBlock(
        bits=qblock.bits,
        qweights=qweights,
        scales=scales,
        norms=dict(qblock.norms),
        heads=qblock.heads,
        residual=qblock.residual,
    )


def forge_model(
    shape: ModelShape, bits: int, config: WatermarkConfig, rng: SeededRng, jobs: int = 1
) -> EmbeddingResult:
    """
    What an adversary without the key store can build: a model of the right
    architecture carrying its own random signature, projection and trigger set.
    """
    model = init_model(shape, SeededRng(rng.next_seed()))
    trigger = make_trigger_set(rng.next_seed(), config.trigger_count, config.trigger_length, shape.vocab)
    forged_config = config.model_copy(update={"bits": bits, "require_full_wer": False})
    pipeline = WatermarkEmbeddingPipeline(forged_config, seed=rng.next_seed(), jobs=jobs)
    return pipeline.run(model, trigger)


def apply_tamper(
    model: QuantizedModel, spec: TamperSpec, config: WatermarkConfig | None = None, jobs: int = 1
) -> tuple[QuantizedModel, list[int]]:
    """Tampered copy of `model` and the ids of the blocks that changed."""
    blocks = model.block_count
    spec.validate(blocks)
    rng = SeededRng(spec.seed)
    shape = model.shape

    if spec.kind in (TamperKind.REPLACE_ALL, TamperKind.FORGE_KEYS):
        targets = list(range(blocks))
    elif spec.targets:
        targets = sorted(spec.targets)
    elif spec.count:
        targets = sorted(int(b) for b in rng.sample_distinct(blocks, spec.count))
    else:
        targets = list(range(blocks))

    new_blocks = list(model.blocks)
    if spec.kind is TamperKind.FORGE_KEYS:
        forged = forge_model(shape, model.bits, config or WatermarkConfig(bits=model.bits), rng, jobs=jobs)
        new_blocks = list(forged.model.blocks)
    else:
        for index in targets:
            if spec.kind is TamperKind.NOISE:
                new_blocks[index] = noisy_block(model.blocks[index], spec.sigma, rng)
            else:
                new_blocks[index] = fresh_block(shape, model.bits, rng)

    logger.info("Applied %s tamper to blocks %s", spec.kind.value, targets)
    tampered = QuantizedModel(
        bits=model.bits,
        embedding=model.embedding,
        blocks=new_blocks,
        final_gain=model.final_gain,
        final_bias=model.final_bias,
    )
    return tampered, targets


def write_substitute(model: QuantizedModel, victim: BundleLayout, path: Path, bundle_repo: BundleRepo = None):
    """Write `model` under the victim's header so it presents the victim's identity."""
    if model.shape != victim.shape or model.bits != victim.bits:
        raise ArchitectureMismatchError(victim.shape, model.shape)
    return (bundle_repo or BundleRepo()).save(model, path, victim.model_id)


def tampered_bundle(
    bundle_path: Path, spec: TamperSpec, out_path: Path, config: WatermarkConfig | None = None
) -> list[int]:
    repo = BundleRepo()
    model, layout = repo.load(bundle_path)
    if not isinstance(model, QuantizedModel):
        raise ValueError("tampering expects a quantized bundle")
    tampered, targets = apply_tamper(model, spec, config)
    write_substitute(tampered, layout, out_path, repo)
    return targets


class ArchitectureMismatchError(ValueError):
    def __init__(self, expected: ModelShape, got: ModelShape):
        super().__init__(f"substitute architecture {got} does not match the victim's {expected}")
        self.expected = expected
        self.got = got
