from dataclasses import dataclass
from pathlib import Path

import numpy as np

from domain.models import KeyStore, ModelShape, QuantizedModel, TriggerSet, WatermarkKey
from model.gradients import pooled_update, project
from model.transformer import block_forward_from, forward, init_model
from numkit.rng import SeededRng
from pipeline.watermark.embed_pipeline import as_checkpoint, make_trigger_set
from pipeline.watermark.verification import decode_bits
from quant.quantizer import dequantize_block, dequantize_model, quantize_model
from repo.bundle_repo import BundleLayout, BundleRepo
from repo.key_store_repo import KeyStoreRepo

SMALL_SHAPE = ModelShape(blocks=4, hidden=8, heads=2, ffn=16, vocab=32)
TEST_KEY = bytes(range(32))
MODEL_ID = b"fixture-model-01"


def small_model(seed: int = 3, shape: ModelShape = SMALL_SHAPE):
    return init_model(shape, SeededRng(seed))


def small_trigger(seed: int = 5, shape: ModelShape = SMALL_SHAPE, count: int = 4, length: int = 6) -> TriggerSet:
    return make_trigger_set(seed, count, length, shape.vocab)


def fitted_keys(
    qmodel: QuantizedModel, trigger: TriggerSet, bits_per_block: int = 20, channels: int = 4, seed: int = 11
) -> list[WatermarkKey]:
    """
    Keys read off the model instead of embedded into it: each signature is the
    decoded sign of a random projection of the block's own pooled output, so the
    model verifies at 100% without running any optimizer.
    """
    rng = SeededRng(seed)
    _, trace = forward(dequantize_model(qmodel), trigger.tokens, capture=True)
    keys = []
    for index, qblock in enumerate(qmodel.blocks):
        checkpoint = as_checkpoint(trace.previous(index))
        chosen = np.sort(rng.sample_distinct(qmodel.shape.hidden, channels))
        # stored as float32 in the key store
        projection = rng.normal(1.0, (bits_per_block, channels)).astype(np.float32).astype(np.float64)
        block = dequantize_block(qblock)
        pooled = pooled_update(block, checkpoint, block_forward_from(block, checkpoint))
        signature = decode_bits(project(pooled, projection, chosen))
        keys.append(
            WatermarkKey(
                block_index=index, projection=projection, channels=chosen, signature=signature, checkpoint=checkpoint
            )
        )
    return keys


@dataclass
class KeyedDeployment:
    model: QuantizedModel
    keys: list[WatermarkKey]
    trigger: TriggerSet
    layout: BundleLayout
    bundle_path: Path
    key_store_path: Path
    key: bytes = TEST_KEY


def keyed_deployment(
    directory: Path, shape: ModelShape = SMALL_SHAPE, bits: int = 8, seed: int = 3, bits_per_block: int = 20
) -> KeyedDeployment:
    """Quantized model, fitted keys, bundle and sealed key store written under `directory`."""
    directory = Path(directory)
    qmodel = quantize_model(small_model(seed, shape), bits)
    trigger = small_trigger(shape=shape)
    keys = fitted_keys(qmodel, trigger, bits_per_block=bits_per_block)

    bundle_path = directory / "model.atlm"
    key_store_path = directory / "keys.atks"
    manifest = BundleRepo().save(qmodel, bundle_path, MODEL_ID)
    layout = BundleRepo().read_layout(bundle_path)
    store = KeyStore(
        keys=keys,
        trigger=trigger,
        bits=bits,
        identity_hash=manifest.identity_sha256,
        total_bits=bits_per_block * shape.blocks,
    )
    KeyStoreRepo(TEST_KEY).save(store, key_store_path)
    return KeyedDeployment(
        model=qmodel,
        keys=keys,
        trigger=trigger,
        layout=layout,
        bundle_path=bundle_path,
        key_store_path=key_store_path,
    )
