from dataclasses import dataclass

import numpy as np

from domain.models import ActivationTrace, ModelShape, ToyBlock, ToyModel
from numkit.kernels import ShapeMismatchError, matmul
from numkit.rng import SeededRng

LN_EPS = 1e-5
SINGLE_HEAD_BELOW = 8


@dataclass
class NormCache:
    normed: np.ndarray
    inv_std: np.ndarray


@dataclass
class AttentionCache:
    u: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    context: np.ndarray


@dataclass
class BlockCache:
    x: np.ndarray
    ln1: NormCache
    attention: AttentionCache
    h: np.ndarray
    ln2: NormCache
    u2: np.ndarray
    pre_relu: np.ndarray
    relu: np.ndarray


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, NormCache]:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    variance = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + LN_EPS)
    normed = centered * inv_std
    return normed * gain + bias, NormCache(normed=normed, inv_std=inv_std)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, s, hidden = x.shape
    return x.reshape(n, s, heads, hidden // heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    n, heads, s, dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, s, heads * dim)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _attention(u: np.ndarray, block: ToyBlock) -> tuple[np.ndarray, AttentionCache]:
    heads = block.heads
    q = split_heads(matmul(u, block.wq), heads)
    k = split_heads(matmul(u, block.wk), heads)
    v = split_heads(matmul(u, block.wv), heads)

    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    scores = np.where(causal_mask(u.shape[1]), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs = probs / probs.sum(axis=-1, keepdims=True)

    context = merge_heads(matmul(probs, v))
    out = matmul(context, block.wo)
    return out, AttentionCache(u=u, q=q, k=k, v=v, probs=probs, context=context)


def as_batch(activation: np.ndarray) -> tuple[np.ndarray, bool]:
    """(tokens, H) is treated as a single sequence; (n, tokens, H) passes through."""
    array = np.asarray(activation, dtype=np.float64)
    if array.ndim == 2:
        return array[None, :, :], True
    if array.ndim == 3:
        return array, False
    raise ShapeMismatchError("block input", array.shape, ("n", "tokens", "H"))


def run_block(block: ToyBlock, x: np.ndarray) -> tuple[np.ndarray, BlockCache]:
    u1, ln1 = layer_norm(x, block.ln1_gain, block.ln1_bias)
    attn_out, attention = _attention(u1, block)
    h = x + attn_out if block.residual else attn_out

    u2, ln2 = layer_norm(h, block.ln2_gain, block.ln2_bias)
    pre_relu = matmul(u2, block.w1)
    relu = np.maximum(pre_relu, 0.0)
    ffn_out = matmul(relu, block.w2)
    y = h + ffn_out if block.residual else ffn_out

    cache = BlockCache(x=x, ln1=ln1, attention=attention, h=h, ln2=ln2, u2=u2, pre_relu=pre_relu, relu=relu)
    return y, cache


def block_forward_from(block: ToyBlock, prev_activation: np.ndarray) -> np.ndarray:
    """Run one block on a stored input activation; same arithmetic as `forward`."""
    x, squeeze = as_batch(prev_activation)
    if x.shape[-1] != block.hidden:
        raise ShapeMismatchError("block_forward_from", x.shape, (block.hidden,))
    y, _ = run_block(block, x)
    return y[0] if squeeze else y


def embed_tokens(model: ToyModel, tokens) -> tuple[np.ndarray, bool]:
    ids = np.asarray(tokens)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InvalidTokenError("token ids must be integers")
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InvalidTokenError(f"expected a non-empty (count, length) id array, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= model.vocab_size:
        raise InvalidTokenError(f"token ids must lie in [0, {model.vocab_size})")
    return np.asarray(model.embedding, dtype=np.float64)[ids], squeeze


def forward(model: ToyModel, tokens, capture: bool = False) -> tuple[np.ndarray, ActivationTrace | None]:
    x, squeeze = embed_tokens(model, tokens)
    inputs = x
    outputs = []
    for block in model.blocks:
        x = block_forward_from(block, x)
        outputs.append(x)

    final, _ = layer_norm(x, model.final_gain, model.final_bias)
    logits = matmul(final, np.asarray(model.embedding, dtype=np.float64).T)
    if squeeze:
        logits = logits[0]

    trace = ActivationTrace(inputs=inputs, outputs=outputs) if capture else None
    return logits, trace


def heads_for(hidden: int, heads: int) -> int:
    return 1 if hidden < SINGLE_HEAD_BELOW else heads


def init_block(hidden: int, ffn: int, heads: int, rng: SeededRng) -> ToyBlock:
    heads = heads_for(hidden, heads)
    attn_std = 1.0 / np.sqrt(hidden)
    return ToyBlock(
        wq=rng.normal(attn_std, (hidden, hidden)),
        wk=rng.normal(attn_std, (hidden, hidden)),
        wv=rng.normal(attn_std, (hidden, hidden)),
        wo=rng.normal(attn_std, (hidden, hidden)),
        w1=rng.normal(attn_std, (hidden, ffn)),
        w2=rng.normal(1.0 / np.sqrt(ffn), (ffn, hidden)),
        ln1_gain=np.ones(hidden),
        ln1_bias=np.zeros(hidden),
        ln2_gain=np.ones(hidden),
        ln2_bias=np.zeros(hidden),
        heads=heads,
    )


def identity_block(hidden: int, ffn: int, heads: int = 1) -> ToyBlock:
    return ToyBlock(
        wq=np.zeros((hidden, hidden)),
        wk=np.zeros((hidden, hidden)),
        wv=np.zeros((hidden, hidden)),
        wo=np.zeros((hidden, hidden)),
        w1=np.zeros((hidden, ffn)),
        w2=np.zeros((ffn, hidden)),
        ln1_gain=np.ones(hidden),
        ln1_bias=np.zeros(hidden),
        ln2_gain=np.ones(hidden),
        ln2_bias=np.zeros(hidden),
        heads=heads_for(hidden, heads),
    )


def init_model(shape: ModelShape, rng: SeededRng) -> ToyModel:
    embedding = rng.normal(1.0, (shape.vocab, shape.hidden))
    blocks = [init_block(shape.hidden, shape.ffn, shape.heads, rng) for _ in range(shape.blocks)]
    return ToyModel(
        embedding=embedding,
        blocks=blocks,
        final_gain=np.ones(shape.hidden),
        final_bias=np.zeros(shape.hidden),
    )


def synthetic_tokens(rng: SeededRng, count: int, length: int, vocab: int) -> np.ndarray:
    return rng.integers(0, vocab, size=(count, length)).astype(np.int64)


def block_forward_mflop(hidden: int, ffn: int, heads: int, count: int, length: int) -> float:
    """Multiply-add count of one block forward over `count` sequences, in MFLOP."""
    tokens = count * length
    linear = 2.0 * tokens * (4 * hidden * hidden + 2 * hidden * ffn)
    attention = 2.0 * count * heads * (2 * length * length * (hidden // heads))
    return (linear + attention) / 1e6


class InvalidTokenError(ValueError):
    pass
