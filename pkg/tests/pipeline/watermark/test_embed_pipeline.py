import unittest
from unittest.mock import MagicMock

import numpy as np

from apis.schemas.config import WatermarkConfig
from domain.models import SignatureSpec
from numkit.rng import SeededRng
from pipeline.watermark.embed_pipeline import (
    POST_ONLY,
    PRE_ONLY,
    WatermarkEmbeddingPipeline,
    draw_projection,
    embed_model,
    histogram_rows,
    make_trigger_set,
)
from pipeline.watermark.errors import NOT_CONVERGED_CODE, EmbeddingError
from pipeline.watermark.post_quant_pipeline import PostQuantResult
from pipeline.watermark.pre_quant_pipeline import PreQuantResult
from tests.fixtures import SMALL_SHAPE, small_model, small_trigger


def small_config(**overrides) -> WatermarkConfig:
    settings = dict(
        bits=8,
        pre_lr=0.01,
        pre_epochs=5,
        post_epochs=3,
        post_only_budget=2,
        subset_size=10,
        signature_bits=24,
        trigger_count=4,
        trigger_length=6,
        require_full_wer=False,
    )
    settings.update(overrides)
    return WatermarkConfig(**settings)


def float32_exact(values: np.ndarray) -> bool:
    return np.array_equal(values, np.asarray(values, dtype=np.float32).astype(np.float64))


class TestWatermarkEmbeddingPipeline(unittest.TestCase):
    def setUp(self):
        self.model = small_model()
        self.trigger = small_trigger()

    def test_two_stage_result(self):
        result = embed_model(self.model, None, self.trigger, small_config(), seed=1)
        self.assertEqual(len(result.keys), SMALL_SHAPE.blocks)
        self.assertEqual(result.signature.total_bits, 24)
        self.assertEqual(sum(report.bits for report in result.reports), 24)
        self.assertEqual(result.model.bits, 8)
        for key, report in zip(result.keys, result.reports):
            self.assertEqual(key.signature.size, report.bits)
            self.assertTrue(float32_exact(key.projection))
            self.assertTrue(float32_exact(key.checkpoint))
            self.assertGreaterEqual(report.wer_final, report.wer_quantized)
            self.assertGreaterEqual(len(report.pre_losses), 1)
            self.assertLessEqual(len(report.pre_losses), 6)

    def test_independent_of_worker_count(self):
        config = small_config()
        serial = embed_model(self.model, None, self.trigger, config, seed=2, jobs=1)
        threaded = embed_model(self.model, None, self.trigger, config, seed=2, jobs=3)
        self.assertEqual(
            [block.digest for block in serial.model.blocks], [block.digest for block in threaded.model.blocks]
        )
        for a, b in zip(serial.keys, threaded.keys):
            np.testing.assert_array_equal(a.projection, b.projection)
            np.testing.assert_array_equal(a.channels, b.channels)

    def test_pre_only_skips_repair(self):
        result = embed_model(self.model, None, self.trigger, small_config(stages=PRE_ONLY), seed=1)
        for report in result.reports:
            self.assertEqual(report.wer_final, report.wer_quantized)
            self.assertEqual(report.post_losses, [])

    def test_post_only_keeps_weights_before_quantization(self):
        result = embed_model(self.model, None, self.trigger, small_config(stages=POST_ONLY), seed=1)
        for report in result.reports:
            self.assertEqual(report.pre_losses, [])
            self.assertEqual(report.drift, 0.0)

    def test_zero_budget_embeds_nothing(self):
        with self.assertLogs("pipeline.watermark.embed_pipeline", level="WARNING") as logs:
            result = embed_model(self.model, None, self.trigger, small_config(signature_bits=0), seed=1)
        self.assertTrue(any("0 bits" in line for line in logs.output))
        self.assertTrue(result.all_converged)
        self.assertEqual([report.bits for report in result.reports], [0] * SMALL_SHAPE.blocks)

    def test_unconverged_blocks_raise_when_full_wer_required(self):
        """
        Scenario: both stages leave the block untouched
        GIVEN a random projection on a plainly quantized block
        THEN extraction stays below 100% and the error carries every block report
        """
        pre_stage = MagicMock()
        pre_stage.run.side_effect = lambda block, key, prev: PreQuantResult(
            block=block, key=key, losses=[], drift=0.0
        )
        post_stage = MagicMock()
        post_stage.run.side_effect = lambda qblock, key, prev, rng, reference_block=None: PostQuantResult(
            qblock=qblock, losses=[], wer=0.0, epochs_run=0, best_epoch=0
        )
        pipeline = WatermarkEmbeddingPipeline(
            small_config(require_full_wer=True), seed=1, pre_stage=pre_stage, post_stage=post_stage
        )
        with self.assertRaises(EmbeddingError) as ctx:
            pipeline.run(self.model, self.trigger)
        self.assertEqual(ctx.exception.code, NOT_CONVERGED_CODE)
        self.assertEqual(len(ctx.exception.reports), SMALL_SHAPE.blocks)
        self.assertEqual(pre_stage.run.call_count, SMALL_SHAPE.blocks)

    def test_supplied_signature_must_cover_every_block(self):
        spec = SignatureSpec(bits=np.ones(4, dtype=np.int8), lengths=[2, 2])
        with self.assertRaises(ValueError):
            embed_model(self.model, spec, self.trigger, small_config())

    def test_key_store_binds_identity(self):
        result = embed_model(self.model, None, self.trigger, small_config(stages=PRE_ONLY), seed=1)
        store = result.key_store("ab" * 32)
        self.assertEqual(store.identity_hash, "ab" * 32)
        self.assertEqual(store.total_bits, 24)
        self.assertEqual(len(store), SMALL_SHAPE.blocks)

    def test_histogram_rows(self):
        result = embed_model(self.model, None, self.trigger, small_config(stages=PRE_ONLY), seed=1)
        rows = histogram_rows(result)
        self.assertEqual(len(rows), SMALL_SHAPE.blocks)
        self.assertEqual(sum(row["bits"] for row in rows), 24)


class TestDrawProjection(unittest.TestCase):
    def test_projected_bits_start_at_requested_scale(self):
        """
        GIVEN pooled activations with norm 40
        WHEN 4000 projection rows are drawn at scale 0.5
        THEN the projected values have a standard deviation near 0.5
        """
        pooled = np.full(16, 10.0)
        projection = draw_projection(SeededRng(3), 4000, pooled, 0.5)
        self.assertEqual(projection.shape, (4000, 16))
        self.assertAlmostEqual(float(np.std(projection @ pooled)), 0.5, delta=0.03)

    def test_silent_activations_fall_back_to_plain_scale(self):
        projection = draw_projection(SeededRng(3), 4000, np.zeros(16), 0.5)
        self.assertAlmostEqual(float(np.std(projection)), 0.5, delta=0.03)


class TestTriggerSet(unittest.TestCase):
    def test_deterministic_in_seed(self):
        a = make_trigger_set(7, 3, 5, 32)
        b = make_trigger_set(7, 3, 5, 32)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        self.assertEqual(a.tokens.shape, (3, 5))
        self.assertTrue(a.tokens.max() < 32)


if __name__ == "__main__":
    unittest.main()
