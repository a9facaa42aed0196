from dataclasses import dataclass

import numpy as np

from domain.models import QuantizedBlock, ToyBlock, WatermarkKey
from model.gradients import pooled_update, project
from model.transformer import block_forward_from
from numkit.kernels import ShapeMismatchError
from quant.quantizer import dequantize_block

FULL_WER = 100.0


@dataclass(frozen=True)
class VerificationResult:
    block_index: int
    wer: float
    decoded: np.ndarray
    projections: np.ndarray

    @property
    def passed(self) -> bool:
        return self.wer == FULL_WER


def decode_bits(projections: np.ndarray) -> np.ndarray:
    return (np.asarray(projections) > 0).astype(np.int8)


def extraction_rate(decoded: np.ndarray, signature: np.ndarray) -> float:
    """Percentage of matching bits; an empty slice is vacuously fully extracted."""
    decoded = np.asarray(decoded)
    signature = np.asarray(signature)
    if decoded.shape != signature.shape:
        raise ShapeMismatchError("extraction_rate", decoded.shape, signature.shape)
    if signature.size == 0:
        return FULL_WER
    return 100.0 * int(np.sum(decoded == signature)) / signature.size


def verify_block(
    block: ToyBlock | QuantizedBlock, key: WatermarkKey, checkpoint: np.ndarray | None = None
) -> VerificationResult:
    """
    Decode block i's signature slice from its own pooled update on the
    checkpointed input A_{i-1}; no other block is executed.
    """
    full = dequantize_block(block) if isinstance(block, QuantizedBlock) else block
    prev = key.checkpoint if checkpoint is None else checkpoint
    if np.shape(prev)[-1] != full.hidden:
        raise ShapeMismatchError("verify_block", np.shape(prev), (full.hidden,))
    if key.signature.size == 0:
        empty = np.zeros(0)
        return VerificationResult(key.block_index, FULL_WER, empty.astype(np.int8), empty)

    output = block_forward_from(full, prev)
    projections = project(pooled_update(full, prev, output), key.projection, key.channels)
    decoded = decode_bits(projections)
    return VerificationResult(
        block_index=key.block_index,
        wer=extraction_rate(decoded, key.signature),
        decoded=decoded,
        projections=projections,
    )
