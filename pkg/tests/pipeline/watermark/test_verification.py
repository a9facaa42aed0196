import unittest

import numpy as np

from domain.models import WatermarkKey
from numkit.kernels import ShapeMismatchError
from pipeline.watermark.verification import FULL_WER, decode_bits, extraction_rate, verify_block
from quant.quantizer import dequantize_block, quantize_model
from tests.fixtures import fitted_keys, small_model, small_trigger


class TestExtractionRate(unittest.TestCase):
    def test_all_bits_match(self):
        self.assertEqual(extraction_rate(np.array([1, 0, 1]), np.array([1, 0, 1])), 100.0)

    def test_partial_match(self):
        self.assertEqual(extraction_rate(np.array([1, 1, 0, 0]), np.array([1, 0, 0, 1])), 50.0)

    def test_empty_slice_is_vacuous(self):
        self.assertEqual(extraction_rate(np.zeros(0), np.zeros(0)), FULL_WER)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            extraction_rate(np.zeros(3), np.zeros(4))

    def test_decode_is_strictly_positive(self):
        self.assertEqual(decode_bits(np.array([-0.5, 0.0, 0.2])).tolist(), [0, 0, 1])


class TestVerifyBlock(unittest.TestCase):
    def setUp(self):
        self.qmodel = quantize_model(small_model(), 8)
        self.keys = fitted_keys(self.qmodel, small_trigger())

    def test_fitted_key_verifies(self):
        for index, key in enumerate(self.keys):
            result = verify_block(self.qmodel.blocks[index], key)
            self.assertTrue(result.passed)
            self.assertEqual(result.block_index, index)

    def test_quantized_and_dequantized_agree(self):
        qblock = self.qmodel.blocks[2]
        key = self.keys[2]
        self.assertEqual(
            verify_block(qblock, key).decoded.tolist(),
            verify_block(dequantize_block(qblock), key).decoded.tolist(),
        )

    def test_negated_projection_flips_every_bit(self):
        key = self.keys[1].with_projection(-self.keys[1].projection)
        self.assertEqual(verify_block(self.qmodel.blocks[1], key).wer, 0.0)

    def test_empty_signature(self):
        key = self.keys[0]
        empty = WatermarkKey(
            block_index=0,
            projection=np.zeros((0, key.channels.size)),
            channels=key.channels,
            signature=np.zeros(0),
            checkpoint=key.checkpoint,
        )
        result = verify_block(self.qmodel.blocks[0], empty)
        self.assertEqual(result.wer, FULL_WER)
        self.assertEqual(result.decoded.size, 0)

    def test_checkpoint_of_wrong_width(self):
        with self.assertRaises(ShapeMismatchError):
            verify_block(self.qmodel.blocks[0], self.keys[0], checkpoint=np.zeros((2, 3, 5)))


if __name__ == "__main__":
    unittest.main()
