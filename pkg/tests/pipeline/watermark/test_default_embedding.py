import unittest

from apis.schemas.config import RunConfig
from model.transformer import init_model
from numkit.rng import SeededRng
from pipeline.watermark.embed_pipeline import POST_ONLY, PRE_ONLY, embed_model, make_trigger_set
from pipeline.watermark.fidelity import fidelity_report, run_ablation
from pipeline.watermark.verification import FULL_WER

JOBS = 4


class DefaultEmbeddingCase:
    """
    Embeds the shipped default configuration end to end, the way `embed` and
    `ablate` do on the command line, at the bit-width set by the subclass.
    """

    bits: int

    @classmethod
    def setUpClass(cls):
        config = RunConfig()
        wm = config.watermark.model_copy(update={"bits": cls.bits})
        shape = config.model.to_shape()
        cls.model = init_model(shape, SeededRng(config.seeds.model))
        trigger = make_trigger_set(config.seeds.trigger, wm.trigger_count, wm.trigger_length, shape.vocab)
        cls.holdout = make_trigger_set(config.seeds.holdout, wm.holdout_count, wm.trigger_length, shape.vocab).tokens

        # require_full_wer stays on, so a block below 100% raises here
        cls.result = embed_model(cls.model, None, trigger, wm, seed=config.seeds.watermark, jobs=JOBS)
        cls.fidelity = fidelity_report(cls.model, cls.result.model, cls.holdout)
        rows = run_ablation(
            cls.model,
            trigger,
            cls.holdout,
            wm,
            seed=config.seeds.watermark,
            jobs=JOBS,
            modes=(PRE_ONLY, POST_ONLY),
            signature=cls.result.signature,
        )
        cls.ablation = {row.mode: row for row in rows}

    def test_every_block_extracts_fully(self):
        self.assertTrue(self.result.all_converged)
        for report in self.result.reports:
            self.assertEqual(report.wer_final, FULL_WER, report.block_index)

    def test_watermark_perturbs_less_than_quantization(self):
        self.assertGreater(self.fidelity.quantization_deviation, 0.0)
        self.assertTrue(self.fidelity.watermark_below_quantization)

    def test_post_only_costs_more_fidelity_than_two_stage(self):
        self.assertGreater(self.ablation[POST_ONLY].watermark_deviation, self.fidelity.watermark_deviation)


class TestDefaultEmbeddingInt8(DefaultEmbeddingCase, unittest.TestCase):
    bits = 8


class TestDefaultEmbeddingInt4(DefaultEmbeddingCase, unittest.TestCase):
    bits = 4

    def test_pre_only_loses_bits_to_quantization(self):
        """
        Scenario: the gradient stage alone at INT4
        GIVEN the default signature and seeds
        WHEN the repair stage is skipped
        THEN quantization leaves at least one block below 100%
        """
        self.assertGreaterEqual(self.ablation[PRE_ONLY].failing_blocks, 1)
        self.assertLess(self.ablation[PRE_ONLY].min_wer, FULL_WER)


if __name__ == "__main__":
    unittest.main()
