from dataclasses import dataclass

import numpy as np

from domain.models import (
    NORM_NAMES,
    QUANT_RANGES,
    WEIGHT_NAMES,
    QuantizedBlock,
    QuantizedModel,
    ToyBlock,
    ToyModel,
)
from model.transformer import block_forward_from

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class ParameterSubset:
    """Flat positions inside named integer tensors."""

    names: tuple[str, ...]
    flat_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.names)


def _check_bits(bits: int) -> int:
    if bits not in QUANT_RANGES:
        raise ValueError(f"bit-width must be one of {sorted(QUANT_RANGES)}, got {bits}")
    return QUANT_RANGES[bits]


def channel_scales(weights: np.ndarray, bits: int) -> np.ndarray:
    qmax = _check_bits(bits)
    peak = np.max(np.abs(weights), axis=0)
    return np.maximum(peak / qmax, SCALE_FLOOR).astype(np.float32)


def quantize_tensor(weights: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-output-channel quantization; columns are output channels."""
    qmax = _check_bits(bits)
    scales = channel_scales(weights, bits)
    # np.rint rounds half to even
    integers = np.clip(np.rint(weights / scales.astype(np.float64)), -qmax, qmax).astype(np.int8)
    return integers, scales


def dequantize_tensor(integers: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return integers.astype(np.float64) * scales.astype(np.float64)


def quantize_block(block: ToyBlock, bits: int) -> QuantizedBlock:
    qweights, scales = {}, {}
    for name in WEIGHT_NAMES:
        qweights[name], scales[name] = quantize_tensor(getattr(block, name), bits)
    norms = {name: np.asarray(getattr(block, name), dtype=np.float32) for name in NORM_NAMES}
    return QuantizedBlock(
        bits=bits, qweights=qweights, scales=scales, norms=norms, heads=block.heads, residual=block.residual
    )


def dequantize_block(qblock: QuantizedBlock) -> ToyBlock:
    params = {name: dequantize_tensor(qblock.qweights[name], qblock.scales[name]) for name in WEIGHT_NAMES}
    params.update({name: qblock.norms[name].astype(np.float64) for name in NORM_NAMES})
    return ToyBlock(**params, heads=qblock.heads, residual=qblock.residual)


def dequantized_forward(qblock: QuantizedBlock, prev_activation: np.ndarray) -> np.ndarray:
    return block_forward_from(dequantize_block(qblock), prev_activation)


def perturb_quantized(qblock: QuantizedBlock, indices: ParameterSubset, delta) -> QuantizedBlock:
    """
    Shift the selected integers by `delta` quantization steps (scalar or one value
    per index), clamped to the bit-width range. Scales are untouched.
    """
    steps = np.broadcast_to(np.asarray(delta, dtype=np.int64), (len(indices),))
    if len(indices) == 0 or not np.any(steps):
        return qblock

    qmax = qblock.qmax
    qweights = dict(qblock.qweights)
    names = np.asarray(indices.names)
    for name in np.unique(names):
        mask = names == name
        tensor = qweights[name].astype(np.int64).ravel()
        flat = indices.flat_indices[mask]
        if flat.size and (flat.min() < 0 or flat.max() >= tensor.size):
            raise IndexError(f"parameter index out of range for {name}")
        np.add.at(tensor, flat, steps[mask])
        qweights[name] = np.clip(tensor, -qmax, qmax).astype(np.int8).reshape(qblock.qweights[name].shape)
    return qblock.with_qweights(qweights)


def facing_positions(qblock: QuantizedBlock, channels: np.ndarray) -> ParameterSubset:
    """Integers writing directly into the selected output channels (wo and w2 columns)."""
    names, flat = [], []
    for name in ("wo", "w2"):
        rows, cols = qblock.qweights[name].shape
        grid = (np.arange(rows)[:, None] * cols + np.asarray(channels)[None, :]).ravel()
        names.extend([name] * grid.size)
        flat.append(grid)
    return ParameterSubset(names=tuple(names), flat_indices=np.concatenate(flat).astype(np.int64))


def sample_subset(candidates: ParameterSubset, size: int, rng) -> ParameterSubset:
    size = min(size, len(candidates))
    picked = np.sort(rng.sample_distinct(len(candidates), size))
    names = tuple(candidates.names[i] for i in picked)
    return ParameterSubset(names=names, flat_indices=candidates.flat_indices[picked])


def quantize_model(model: ToyModel, bits: int) -> QuantizedModel:
    return QuantizedModel(
        bits=bits,
        embedding=np.asarray(model.embedding, dtype=np.float32),
        blocks=[quantize_block(block, bits) for block in model.blocks],
        final_gain=np.asarray(model.final_gain, dtype=np.float32),
        final_bias=np.asarray(model.final_bias, dtype=np.float32),
    )


def dequantize_model(qmodel: QuantizedModel) -> ToyModel:
    return ToyModel(
        embedding=qmodel.embedding.astype(np.float64),
        blocks=[dequantize_block(block) for block in qmodel.blocks],
        final_gain=qmodel.final_gain.astype(np.float64),
        final_bias=qmodel.final_bias.astype(np.float64),
    )
