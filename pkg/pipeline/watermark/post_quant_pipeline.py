from dataclasses import dataclass

import numpy as np

from domain.models import QuantizedBlock, ToyBlock, WatermarkKey
from infraestructure.logging_setup import get_logger
from model.gradients import watermark_loss
from numkit.rng import SeededRng
from numkit.zeroth_order import spsa_estimate
from pipeline.base_pipeline import BlockStage
from pipeline.watermark.errors import DIVERGED_CODE, EmbeddingError
from pipeline.watermark.verification import FULL_WER, verify_block
from quant.quantizer import dequantize_block, facing_positions, perturb_quantized, sample_subset

logger = get_logger(__name__)

DIVERGENCE_FACTOR = 10.0
# targets are +-1, so an all-zero projection already costs 1.0
DIVERGENCE_FLOOR = 1.0


@dataclass
class PostQuantResult:
    qblock: QuantizedBlock
    losses: list[float]
    wer: float
    epochs_run: int
    best_epoch: int

    @property
    def converged(self) -> bool:
        return self.wer == FULL_WER


class PostQuantStage(BlockStage):
    """
    Zeroth-order stage on the integer weights. Every epoch draws a subset of the
    integers that write into the watermark channels, forms the SPSA estimate
    from the loss at +-mu steps along a Rademacher direction, and proposes
    moving each integer by max(1, round(lr * mu)) steps against the sign of its
    estimate. A proposal is kept only if the loss does not rise. The projection
    stays frozen. The stage stops once every bit decodes or the epoch budget
    runs out, and returns the best state by (WER, -loss).
    """

    name = "post_quant"

    def __init__(self, mu: int, subset_size: int, lr: float, epochs: int, alpha: float = 0.0, max_epochs=None):
        if mu < 1:
            raise ValueError(f"perturbation strength must be >= 1 step, got {mu}")
        if subset_size < 1:
            raise ValueError(f"subset size must be >= 1, got {subset_size}")
        self.mu = mu
        self.subset_size = subset_size
        self.lr = lr
        self.epochs = epochs
        self.alpha = alpha
        self.max_epochs = max(epochs, max_epochs or epochs)

    @property
    def step_size(self) -> int:
        if self.lr <= 0:
            return 0
        return max(1, int(round(self.lr * self.mu)))

    def run(
        self,
        qblock: QuantizedBlock,
        key: WatermarkKey,
        prev_activations: np.ndarray,
        rng: SeededRng,
        reference_block: ToyBlock | None = None,
    ) -> PostQuantResult:
        if key.signature.size == 0:
            return PostQuantResult(qblock=qblock, losses=[0.0], wer=FULL_WER, epochs_run=0, best_epoch=0)

        reference = reference_block if reference_block is not None else dequantize_block(qblock)
        targets = key.targets

        def loss_of(candidate: QuantizedBlock) -> float:
            objective = watermark_loss(
                dequantize_block(candidate), key.projection, prev_activations, targets, self.alpha, reference,
                channels=key.channels,
            )
            return objective.loss

        candidates = facing_positions(qblock, key.channels)
        current = qblock
        current_loss = loss_of(current)
        limit = DIVERGENCE_FACTOR * max(current_loss, DIVERGENCE_FLOOR)
        losses = [current_loss]
        best = (verify_block(current, key, prev_activations).wer, -current_loss)
        best_block, best_epoch = current, 0
        rejected = 0

        epoch = 0
        while epoch < self.max_epochs and best[0] < FULL_WER:
            epoch += 1
            subset = sample_subset(candidates, self.subset_size, rng)
            direction = rng.rademacher(len(subset))

            def offset_loss(offset: np.ndarray) -> float:
                return loss_of(perturb_quantized(current, subset, np.rint(offset).astype(np.int64)))

            gradient, _, _ = spsa_estimate(offset_loss, np.zeros(len(subset)), direction, self.mu)
            move = -self.step_size * np.sign(gradient).astype(np.int64)
            if np.any(move):
                candidate = perturb_quantized(current, subset, move)
                candidate_loss = loss_of(candidate)
                if candidate_loss > limit:
                    raise EmbeddingError(
                        DIVERGED_CODE,
                        block_index=key.block_index,
                        detail=f"loss {candidate_loss:.4g} vs limit {limit:.4g}",
                    )
                if candidate_loss <= current_loss:
                    current, current_loss = candidate, candidate_loss
                    score = (verify_block(current, key, prev_activations).wer, -current_loss)
                    if score > best:
                        best, best_block, best_epoch = score, current, epoch
                else:
                    rejected += 1
            losses.append(current_loss)

        if rejected:
            logger.debug("Block %d: %d post-quant steps rejected for raising the loss", key.block_index, rejected)
        return PostQuantResult(qblock=best_block, losses=losses, wer=best[0], epochs_run=epoch, best_epoch=best_epoch)


def embed_post_quant(
    qblock: QuantizedBlock,
    wm_key: WatermarkKey,
    prev_activations: np.ndarray,
    mu: int,
    subset_size: int,
    lr: float,
    epochs: int,
    rng: SeededRng,
    alpha: float = 0.0,
    reference_block: ToyBlock | None = None,
    max_epochs: int | None = None,
) -> PostQuantResult:
    stage = PostQuantStage(
        mu=mu, subset_size=subset_size, lr=lr, epochs=epochs, alpha=alpha, max_epochs=max_epochs
    )
    return stage.run(qblock, wm_key, prev_activations, rng, reference_block=reference_block)
