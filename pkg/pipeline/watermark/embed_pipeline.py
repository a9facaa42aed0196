from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from apis.schemas.config import WatermarkConfig
from domain.models import (
    KeyStore,
    QuantizedBlock,
    QuantizedModel,
    SignatureSpec,
    ToyBlock,
    ToyModel,
    TriggerSet,
    WatermarkKey,
)
from infraestructure.logging_setup import get_logger
from model.gradients import pooled_update
from model.transformer import block_forward_from, synthetic_tokens
from numkit.rng import SeededRng
from pipeline.base_pipeline import OrchestrationPipeline
from pipeline.watermark.allocation import (
    ActivationProfile,
    allocate_signature_lengths,
    profile_activations,
    random_signature,
    select_channels,
    signature_histogram,
)
from pipeline.watermark.errors import NOT_CONVERGED_CODE, EmbeddingError
from pipeline.watermark.post_quant_pipeline import PostQuantStage
from pipeline.watermark.pre_quant_pipeline import PreQuantStage
from pipeline.watermark.verification import FULL_WER, verify_block
from quant.quantizer import dequantize_block, quantize_block

logger = get_logger(__name__)

TWO_STAGE = "two_stage"
PRE_ONLY = "pre_only"
POST_ONLY = "post_only"
# below this norm the trigger activations carry no usable scale
POOLED_NORM_FLOOR = 1e-8


@dataclass
class BlockReport:
    block_index: int
    bits: int
    channels: int
    wer_full_precision: float
    wer_quantized: float
    wer_final: float
    drift: float
    pre_losses: list[float] = field(default_factory=list)
    post_losses: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.wer_final == FULL_WER

    def row(self) -> dict:
        return {
            "block": self.block_index,
            "bits": self.bits,
            "channels": self.channels,
            "wer_fp": round(self.wer_full_precision, 2),
            "wer_quant": round(self.wer_quantized, 2),
            "wer": round(self.wer_final, 2),
            "drift": round(self.drift, 6),
        }


@dataclass
class EmbeddingResult:
    model: QuantizedModel
    keys: list[WatermarkKey]
    signature: SignatureSpec
    trigger: TriggerSet
    reports: list[BlockReport]

    @property
    def all_converged(self) -> bool:
        return all(report.converged for report in self.reports)

    def key_store(self, identity_hash: str) -> KeyStore:
        return KeyStore(
            keys=self.keys,
            trigger=self.trigger,
            bits=self.model.bits,
            identity_hash=identity_hash,
            total_bits=self.signature.total_bits,
        )


@dataclass
class _BlockOutcome:
    qblock: QuantizedBlock
    key: WatermarkKey
    report: BlockReport


def make_trigger_set(seed: int, count: int, length: int, vocab: int) -> TriggerSet:
    return TriggerSet(tokens=synthetic_tokens(SeededRng(seed), count, length, vocab), seed=seed)


def as_checkpoint(activation: np.ndarray) -> np.ndarray:
    """Round to what the key store keeps (float32) so verification sees the same input."""
    return np.asarray(activation, dtype=np.float32).astype(np.float64)


def draw_projection(rng: SeededRng, rows: int, pooled: np.ndarray, scale: float) -> np.ndarray:
    """
    Gaussian projection with entries ~ N(0, (scale / |pooled|)^2), so each projected
    bit starts ~ N(0, scale^2) on the block's pooled update over the trigger set.
    """
    norm = float(np.linalg.norm(pooled))
    std = scale / norm if norm > POOLED_NORM_FLOOR else scale
    return rng.normal(std, (rows, pooled.size))


class WatermarkEmbeddingPipeline(OrchestrationPipeline):
    """
    Embed a signature into every block of a full-precision model and quantize it.

    Per block, independently of the others:
    1. Checkpoint the block input A_{i-1} from the full-precision trace on the trigger set.
    2. Sample the watermark channels (low-activation channels are preferred).
    3. Draw the projection, scaled to the block's pooled trigger activations, and run
       the gradient stage before quantization.
    4. Quantize the block.
    5. Repair flipped bits with the zeroth-order stage on the integers.

    Signature lengths are allocated across blocks before any block is processed.
    """

    def __init__(
        self,
        config: WatermarkConfig,
        seed: int,
        jobs: int = 1,
        pre_stage: PreQuantStage = None,
        post_stage: PostQuantStage = None,
    ):
        self.config = config
        self.seed = seed
        self.jobs = max(1, jobs)
        self.pre_stage = pre_stage or PreQuantStage(
            alpha=config.alpha, lr=config.pre_lr, epochs=config.pre_epochs, projection_lr=config.projection_lr
        )
        budget = config.post_epochs * config.post_only_budget
        self.post_stage = post_stage or PostQuantStage(
            mu=config.effective_mu,
            subset_size=config.subset_size,
            lr=config.effective_post_lr,
            epochs=config.post_epochs,
            alpha=config.alpha,
            max_epochs=budget,
        )

    def run(self, model: ToyModel, trigger: TriggerSet, signature: SignatureSpec | None = None) -> EmbeddingResult:
        rng = SeededRng(self.seed)
        profile = profile_activations(model, trigger)
        if signature is None:
            lengths = allocate_signature_lengths(profile.peaks, self.config.signature_bits)
            signature = random_signature(lengths, rng.child(0))
        elif len(signature.lengths) != model.block_count:
            raise ValueError(f"signature has {len(signature.lengths)} slices for {model.block_count} blocks")

        if signature.total_bits == 0:
            logger.warning("Signature budget is 0 bits: nothing embedded")
        logger.info(
            "Embedding %d-bit signature into %d blocks (INT%d, stages=%s, jobs=%d)",
            signature.total_bits,
            model.block_count,
            self.config.bits,
            self.config.stages,
            self.jobs,
        )

        streams = rng.child(1).spawn(model.block_count)
        jobs = [(i, streams[i]) for i in range(model.block_count)]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            outcomes = list(pool.map(lambda job: self._embed_block(model, profile, signature, *job), jobs))

        reports = [outcome.report for outcome in outcomes]
        for report in reports:
            logger.info(
                "Block %d: %d bits, WER fp %.1f%% -> quantized %.1f%% -> final %.1f%%, drift %.3g",
                report.block_index,
                report.bits,
                report.wer_full_precision,
                report.wer_quantized,
                report.wer_final,
                report.drift,
            )

        result = EmbeddingResult(
            model=QuantizedModel(
                bits=self.config.bits,
                embedding=np.asarray(model.embedding, dtype=np.float32),
                blocks=[outcome.qblock for outcome in outcomes],
                final_gain=np.asarray(model.final_gain, dtype=np.float32),
                final_bias=np.asarray(model.final_bias, dtype=np.float32),
            ),
            keys=[outcome.key for outcome in outcomes],
            signature=signature,
            trigger=trigger,
            reports=reports,
        )

        failing = [report.block_index for report in reports if not report.converged]
        if failing:
            if self.config.require_full_wer:
                raise EmbeddingError(
                    NOT_CONVERGED_CODE, reports=reports, detail=f"blocks below 100%: {failing}"
                )
            logger.warning("Blocks below 100%% WER after embedding: %s", failing)
        return result

    def _embed_block(
        self, model: ToyModel, profile: ActivationProfile, signature: SignatureSpec, index: int, rng: SeededRng
    ) -> _BlockOutcome:
        block = model.blocks[index]
        checkpoint = as_checkpoint(profile.trace.previous(index))
        channels = select_channels(profile.channel_means[index], self.config.channel_fraction, rng)
        bits = signature.slice(index)
        pooled = pooled_update(block, checkpoint, block_forward_from(block, checkpoint))[channels]
        projection = draw_projection(rng, bits.size, pooled, self.config.projection_scale)
        key = WatermarkKey(
            block_index=index, projection=projection, channels=channels, signature=bits, checkpoint=checkpoint
        )

        stages = self.config.stages
        pre_losses: list[float] = []
        embedded: ToyBlock = block
        if stages != POST_ONLY:
            pre = self.pre_stage.run(block, key, checkpoint)
            embedded, key, pre_losses = pre.block, pre.key, pre.losses
        key = key.with_projection(np.asarray(key.projection, dtype=np.float32).astype(np.float64))
        wer_fp = verify_block(embedded, key).wer

        qblock = quantize_block(embedded, self.config.bits)
        wer_quantized = verify_block(qblock, key).wer

        post_losses: list[float] = []
        if stages != PRE_ONLY:
            reference = dequantize_block(qblock)
            post = self.post_stage.run(qblock, key, checkpoint, rng, reference_block=reference)
            qblock, post_losses = post.qblock, post.losses

        report = BlockReport(
            block_index=index,
            bits=int(bits.size),
            channels=int(channels.size),
            wer_full_precision=wer_fp,
            wer_quantized=wer_quantized,
            wer_final=verify_block(qblock, key).wer,
            drift=embedded.squared_distance(block),
            pre_losses=pre_losses,
            post_losses=post_losses,
        )
        return _BlockOutcome(qblock=qblock, key=key, report=report)


def embed_model(
    model: ToyModel,
    spec: SignatureSpec | None,
    trigger_set: TriggerSet,
    config: WatermarkConfig,
    seed: int = 0,
    jobs: int = 1,
) -> EmbeddingResult:
    return WatermarkEmbeddingPipeline(config, seed=seed, jobs=jobs).run(model, trigger_set, spec)


def histogram_rows(result: EmbeddingResult) -> list[dict]:
    return signature_histogram(result.signature.lengths).rows()
