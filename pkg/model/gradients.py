from dataclasses import dataclass

import numpy as np

from domain.models import ToyBlock
from model.transformer import (
    BlockCache,
    NormCache,
    as_batch,
    merge_heads,
    run_block,
    split_heads,
)
from numkit.kernels import ShapeMismatchError, matmul


@dataclass
class ObjectiveValue:
    loss: float
    watermark_loss: float
    drift: float
    projections: np.ndarray


@dataclass
class BlockGradients:
    params: dict[str, np.ndarray]
    wm: np.ndarray


def pool(activation: np.ndarray) -> np.ndarray:
    """Mean over token positions, then over trigger samples."""
    x, _ = as_batch(activation)
    return x.mean(axis=1).mean(axis=0)


def pooled_update(block: ToyBlock, prev_activation: np.ndarray, output: np.ndarray) -> np.ndarray:
    """
    Pooled contribution of the block itself: pool(output - input) on residual
    blocks, pool(output) otherwise. The input is the checkpointed A_{i-1}.
    """
    pooled = pool(output)
    return pooled - pool(prev_activation) if block.residual else pooled


def project(pooled: np.ndarray, wm: np.ndarray, channels: np.ndarray | None) -> np.ndarray:
    selected = pooled if channels is None else pooled[channels]
    if wm.shape[0] == 0:
        return np.zeros(0)
    if wm.shape[1] != selected.shape[0]:
        raise ShapeMismatchError("projection", wm.shape, selected.shape)
    return matmul(wm, selected[:, None])[:, 0]


def _watermark_term(projections: np.ndarray, targets: np.ndarray) -> float:
    if projections.size == 0:
        return 0.0
    return float(np.mean(np.abs(projections - targets)))


def _check_inputs(block: ToyBlock, wm: np.ndarray, targets: np.ndarray, channels, alpha: float) -> np.ndarray:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    width = block.hidden if channels is None else len(channels)
    if wm.shape != (targets.size, width):
        raise ShapeMismatchError("projection", wm.shape, (targets.size, width))
    return np.asarray(targets, dtype=np.float64)


def watermark_loss(
    block: ToyBlock,
    wm: np.ndarray,
    prev_activation: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    reference_block: ToyBlock,
    channels: np.ndarray | None = None,
) -> ObjectiveValue:
    targets = _check_inputs(block, wm, targets, channels, alpha)
    x, _ = as_batch(prev_activation)
    y, _ = run_block(block, x)
    projections = project(pooled_update(block, x, y), wm, channels)
    wm_term = _watermark_term(projections, targets)
    drift = block.squared_distance(reference_block)
    return ObjectiveValue(
        loss=wm_term + alpha * drift, watermark_loss=wm_term, drift=drift, projections=projections
    )


def _flat(values: np.ndarray) -> np.ndarray:
    return values.reshape(-1, values.shape[-1])


def _norm_backward(grad_out: np.ndarray, gain: np.ndarray, cache: NormCache):
    d_gain = np.sum(_flat(grad_out * cache.normed), axis=0)
    d_bias = np.sum(_flat(grad_out), axis=0)
    d_normed = grad_out * gain
    d_input = cache.inv_std * (
        d_normed
        - d_normed.mean(axis=-1, keepdims=True)
        - cache.normed * np.mean(d_normed * cache.normed, axis=-1, keepdims=True)
    )
    return d_input, d_gain, d_bias


def _block_backward(block: ToyBlock, cache: BlockCache, grad_y: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}

    # FFN branch
    grads["w2"] = matmul(_flat(cache.relu).T, _flat(grad_y))
    d_relu = matmul(grad_y, block.w2.T)
    d_pre = d_relu * (cache.pre_relu > 0)
    grads["w1"] = matmul(_flat(cache.u2).T, _flat(d_pre))
    d_u2 = matmul(d_pre, block.w1.T)
    d_h_norm, grads["ln2_gain"], grads["ln2_bias"] = _norm_backward(d_u2, block.ln2_gain, cache.ln2)
    grad_h = d_h_norm + grad_y if block.residual else d_h_norm

    # Attention branch
    attention = cache.attention
    grads["wo"] = matmul(_flat(attention.context).T, _flat(grad_h))
    d_context = split_heads(matmul(grad_h, block.wo.T), block.heads)
    d_probs = matmul(d_context, attention.v.swapaxes(-1, -2))
    d_v = matmul(attention.probs.swapaxes(-1, -2), d_context)
    d_scores = attention.probs * (d_probs - np.sum(d_probs * attention.probs, axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(attention.q.shape[-1])
    d_q = merge_heads(matmul(d_scores, attention.k) * scale)
    d_k = merge_heads(matmul(d_scores.swapaxes(-1, -2), attention.q) * scale)
    d_v = merge_heads(d_v)

    u1 = _flat(attention.u)
    grads["wq"] = matmul(u1.T, _flat(d_q))
    grads["wk"] = matmul(u1.T, _flat(d_k))
    grads["wv"] = matmul(u1.T, _flat(d_v))
    d_u1 = matmul(d_q, block.wq.T) + matmul(d_k, block.wk.T) + matmul(d_v, block.wv.T)
    _, grads["ln1_gain"], grads["ln1_bias"] = _norm_backward(d_u1, block.ln1_gain, cache.ln1)
    return grads


def loss_and_gradients(
    block: ToyBlock,
    wm: np.ndarray,
    prev_activation: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    reference_block: ToyBlock,
    channels: np.ndarray | None = None,
) -> tuple[ObjectiveValue, BlockGradients]:
    """
    Watermark objective mean|WM . pooled(y - x)[C] - t| + alpha * ||block - reference||^2
    and its reverse-mode gradients for every block parameter and for WM.
    """
    targets = _check_inputs(block, wm, targets, channels, alpha)
    x, _ = as_batch(prev_activation)
    if x.shape[-1] != block.hidden:
        raise ShapeMismatchError("loss_and_gradients", x.shape, (block.hidden,))
    y, cache = run_block(block, x)

    pooled = pooled_update(block, x, y)
    selected = pooled if channels is None else pooled[channels]
    projections = project(pooled, wm, channels)
    wm_term = _watermark_term(projections, targets)
    drift = block.squared_distance(reference_block)
    objective = ObjectiveValue(
        loss=wm_term + alpha * drift, watermark_loss=wm_term, drift=drift, projections=projections
    )

    if projections.size:
        d_projections = np.sign(projections - targets) / projections.size
    else:
        d_projections = np.zeros(0)
    d_wm = np.outer(d_projections, selected)
    d_selected = wm.T @ d_projections if projections.size else np.zeros_like(selected)

    d_pooled = np.zeros(block.hidden)
    if channels is None:
        d_pooled += d_selected
    else:
        d_pooled[channels] = d_selected
    n, s, _ = y.shape
    grad_y = np.broadcast_to(d_pooled / (n * s), y.shape).copy()

    grads = _block_backward(block, cache, grad_y)
    if alpha:
        for name, value in block.params().items():
            grads[name] = grads[name] + 2.0 * alpha * (value - getattr(reference_block, name))
    return objective, BlockGradients(params=grads, wm=d_wm)
