from dataclasses import dataclass, field

import numpy as np

from domain.models import ToyBlock, WatermarkKey
from infraestructure.logging_setup import get_logger
from model.gradients import loss_and_gradients
from numkit.kernels import NonFiniteValueError
from pipeline.base_pipeline import BlockStage
from pipeline.watermark.errors import NAN_LOSS_CODE, EmbeddingError
from pipeline.watermark.verification import decode_bits

logger = get_logger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MAX_HALVINGS = 8
REGRESSION_TOL = 1e-6
PROJECTION = "wm"


def relative_scale(value: np.ndarray) -> float:
    """RMS of a tensor; 1.0 for an all-zero tensor such as a fresh bias."""
    rms = float(np.sqrt(np.mean(np.square(value)))) if np.size(value) else 0.0
    return rms if rms > 0 else 1.0


def decodes(projections: np.ndarray, key: WatermarkKey) -> bool:
    return bool(np.array_equal(decode_bits(projections), key.signature))


@dataclass
class AdamState:
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    def direction(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Bias-corrected Adam direction; the caller scales it by the learning rate."""
        self.step += 1
        out = {}
        for name, grad in grads.items():
            m = self.first.get(name, np.zeros_like(grad))
            v = self.second.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.first[name], self.second[name] = m, v
            m_hat = m / (1.0 - self.beta1**self.step)
            v_hat = v / (1.0 - self.beta2**self.step)
            out[name] = m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass
class PreQuantResult:
    block: ToyBlock
    key: WatermarkKey
    losses: list[float]
    drift: float
    skipped_epochs: int = 0
    epochs_run: int = 0


class PreQuantStage(BlockStage):
    """
    Gradient stage on the full-precision block: jointly moves the block weights
    and the projection towards the signature targets, with an alpha-weighted
    penalty on drift from the original block.

    Adam steps are scaled by each tensor's starting RMS, so `lr` is a fraction
    of the weight scale and `projection_lr` a fraction of the projection scale.
    Steps that raise the loss are retried at half the size, up to 8 times, and
    then skipped. The stage stops as soon as every bit decodes at full precision.
    """

    name = "pre_quant"

    def __init__(self, alpha: float, lr: float, epochs: int, projection_lr: float | None = None):
        if epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {epochs}")
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        projection_lr = lr if projection_lr is None else projection_lr
        if projection_lr <= 0:
            raise ValueError(f"projection learning rate must be > 0, got {projection_lr}")
        self.alpha = alpha
        self.lr = lr
        self.projection_lr = projection_lr
        self.epochs = epochs

    def run(self, block: ToyBlock, key: WatermarkKey, prev_activations: np.ndarray) -> PreQuantResult:
        if key.signature.size == 0:
            return PreQuantResult(block=block, key=key, losses=[0.0], drift=0.0)

        reference = block
        targets = key.targets
        current_block, current_wm = block, key.projection
        rates = {name: self.lr * relative_scale(value) for name, value in block.params().items()}
        rates[PROJECTION] = self.projection_lr * relative_scale(key.projection)

        objective, grads = self._evaluate(current_block, current_wm, prev_activations, targets, reference, key)
        losses = [objective.loss]
        adam = AdamState()
        skipped = 0
        epochs_run = 0

        while epochs_run < self.epochs and not decodes(objective.projections, key):
            epochs_run += 1
            direction = adam.direction({**grads.params, PROJECTION: grads.wm})
            multiplier = 1.0
            accepted = False
            for _ in range(MAX_HALVINGS + 1):
                params = {
                    name: value - multiplier * rates[name] * direction[name]
                    for name, value in current_block.params().items()
                }
                candidate_block = current_block.with_params(params)
                candidate_wm = current_wm - multiplier * rates[PROJECTION] * direction[PROJECTION]
                candidate, candidate_grads = self._evaluate(
                    candidate_block, candidate_wm, prev_activations, targets, reference, key
                )
                if candidate.loss <= objective.loss + REGRESSION_TOL:
                    current_block, current_wm = candidate_block, candidate_wm
                    objective, grads = candidate, candidate_grads
                    accepted = True
                    break
                multiplier *= 0.5

            if not accepted:
                skipped += 1
            losses.append(objective.loss)

        if skipped:
            logger.debug("Block %d: %d pre-quant epochs skipped after step halving", key.block_index, skipped)
        logger.debug("Block %d: pre-quant stage ran %d of %d epochs", key.block_index, epochs_run, self.epochs)
        return PreQuantResult(
            block=current_block,
            key=key.with_projection(current_wm),
            losses=losses,
            drift=current_block.squared_distance(reference),
            skipped_epochs=skipped,
            epochs_run=epochs_run,
        )

    def _evaluate(self, block, wm, prev_activations, targets, reference, key):
        try:
            objective, grads = loss_and_gradients(
                block, wm, prev_activations, targets, self.alpha, reference, channels=key.channels
            )
        except NonFiniteValueError as e:
            raise EmbeddingError(NAN_LOSS_CODE, block_index=key.block_index, detail=str(e)) from e
        if not np.isfinite(objective.loss):
            raise EmbeddingError(NAN_LOSS_CODE, block_index=key.block_index)
        return objective, grads


def embed_pre_quant(
    block: ToyBlock,
    wm_key: WatermarkKey,
    prev_activations: np.ndarray,
    alpha: float,
    lr: float,
    epochs: int,
    projection_lr: float | None = None,
) -> PreQuantResult:
    stage = PreQuantStage(alpha=alpha, lr=lr, epochs=epochs, projection_lr=projection_lr)
    return stage.run(block, wm_key, prev_activations)
