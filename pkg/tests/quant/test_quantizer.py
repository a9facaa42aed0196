import unittest

import numpy as np

from domain.models import WEIGHT_NAMES
from model.transformer import init_block
from numkit.rng import SeededRng
from quant.quantizer import (
    ParameterSubset,
    dequantize_block,
    dequantize_tensor,
    facing_positions,
    perturb_quantized,
    quantize_block,
    quantize_tensor,
    sample_subset,
)


class TestQuantizeTensor(unittest.TestCase):
    def test_int8_range_and_scales(self):
        weights = np.array([[1.0, -0.5], [-2.0, 0.25]])
        integers, scales = quantize_tensor(weights, 8)
        np.testing.assert_allclose(scales, np.array([2.0 / 127, 0.5 / 127], dtype=np.float32))
        self.assertEqual(integers.dtype, np.int8)
        self.assertEqual(int(integers[1, 0]), -127)
        self.assertEqual(int(integers[0, 1]), -127)

    def test_half_step_rounds_to_even(self):
        """
        GIVEN a column whose peak is 1.0 at INT8
        THEN 0.5 sits at 63.5 steps and rounds to 64
        """
        integers, scales = quantize_tensor(np.array([[1.0], [0.5], [-0.5]]), 8)
        self.assertAlmostEqual(float(scales[0]), 1.0 / 127, places=9)
        self.assertEqual(integers[:, 0].tolist(), [127, 64, -64])

    def test_quantizing_dequantized_weights_is_idempotent(self):
        weights = SeededRng(2).normal(1.0, (24, 6))
        for bits in (4, 8):
            integers, scales = quantize_tensor(weights, bits)
            again, rescaled = quantize_tensor(dequantize_tensor(integers, scales), bits)
            np.testing.assert_array_equal(again, integers)
            np.testing.assert_array_equal(rescaled, scales)

    def test_int4_clamps_to_seven(self):
        integers, _ = quantize_tensor(SeededRng(0).normal(1.0, (16, 4)), 4)
        self.assertLessEqual(int(np.abs(integers).max()), 7)

    def test_round_trip_error_within_half_step(self):
        weights = SeededRng(1).normal(1.0, (32, 8))
        integers, scales = quantize_tensor(weights, 8)
        error = np.abs(dequantize_tensor(integers, scales) - weights)
        self.assertTrue(np.all(error <= scales.astype(np.float64) / 2 + 1e-9))

    def test_zero_column_uses_scale_floor(self):
        _, scales = quantize_tensor(np.zeros((3, 2)), 8)
        self.assertTrue(np.all(scales > 0))

    def test_unsupported_bits(self):
        with self.assertRaises(ValueError):
            quantize_tensor(np.ones((2, 2)), 3)


class TestQuantizedBlock(unittest.TestCase):
    def setUp(self):
        self.block = init_block(8, 16, 2, SeededRng(4))
        self.qblock = quantize_block(self.block, 8)

    def test_block_round_trip_is_close(self):
        restored = dequantize_block(self.qblock)
        for name in WEIGHT_NAMES:
            np.testing.assert_allclose(getattr(restored, name), getattr(self.block, name), atol=0.02)
        self.assertEqual(restored.heads, self.block.heads)

    def test_zero_points_are_zero(self):
        for points in self.qblock.zero_points.values():
            self.assertFalse(np.any(points))

    def test_perturb_moves_selected_integers_only(self):
        subset = ParameterSubset(names=("wo", "w2"), flat_indices=np.array([0, 5]))
        moved = perturb_quantized(self.qblock, subset, np.array([1, -1]))
        delta_wo = moved.qweights["wo"].astype(int) - self.qblock.qweights["wo"].astype(int)
        self.assertLessEqual(int(np.count_nonzero(delta_wo)), 1)
        np.testing.assert_array_equal(moved.qweights["wq"], self.qblock.qweights["wq"])
        np.testing.assert_array_equal(moved.scales["wo"], self.qblock.scales["wo"])

    def test_perturb_commutes_with_dequantize(self):
        """
        GIVEN one-step moves on w2 positions that do not hit the clamp
        THEN the dequantized weights move by exactly the column scale there and nowhere else
        """
        hidden = self.qblock.hidden
        unclamped = np.flatnonzero(np.abs(self.qblock.qweights["w2"].astype(np.int64).ravel()) < 127)
        flat = unclamped[::7]
        subset = ParameterSubset(names=("w2",) * flat.size, flat_indices=flat)

        moved = perturb_quantized(self.qblock, subset, 1)
        delta = (dequantize_block(moved).w2 - dequantize_block(self.qblock).w2).ravel()
        expected = np.zeros_like(delta)
        expected[flat] = self.qblock.scales["w2"].astype(np.float64)[flat % hidden]
        np.testing.assert_allclose(delta, expected, rtol=0, atol=1e-12)

    def test_perturb_clamps(self):
        subset = ParameterSubset(names=("wq",), flat_indices=np.array([0]))
        moved = perturb_quantized(self.qblock, subset, 1000)
        self.assertEqual(int(moved.qweights["wq"].ravel()[0]), 127)

    def test_zero_delta_returns_same_block(self):
        subset = ParameterSubset(names=("wq",), flat_indices=np.array([0]))
        self.assertIs(perturb_quantized(self.qblock, subset, 0), self.qblock)

    def test_out_of_range_index(self):
        subset = ParameterSubset(names=("wq",), flat_indices=np.array([10_000]))
        with self.assertRaises(IndexError):
            perturb_quantized(self.qblock, subset, 1)

    def test_facing_positions_cover_wo_and_w2_columns(self):
        channels = np.array([1, 6])
        subset = facing_positions(self.qblock, channels)
        self.assertEqual(len(subset), 2 * 8 + 2 * 16)
        self.assertEqual(set(subset.names), {"wo", "w2"})
        cols = subset.flat_indices % 8
        self.assertTrue(set(np.unique(cols)) <= {1, 6})

    def test_sample_subset_caps_at_candidates(self):
        subset = facing_positions(self.qblock, np.array([0]))
        picked = sample_subset(subset, 1000, SeededRng(0))
        self.assertEqual(len(picked), len(subset))


if __name__ == "__main__":
    unittest.main()
