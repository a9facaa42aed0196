import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from apis import simulated_enclave
from apis.simulated_enclave import SimulatedEnclave
from model.transformer import init_model
from numkit.rng import SeededRng
from quant.quantizer import quantize_model
from repo.bundle_repo import BundleRepo
from repo.key_store_repo import KeyStoreAuthenticationError
from tests.fixtures import MODEL_ID, SMALL_SHAPE, TEST_KEY, keyed_deployment


class TestSimulatedEnclave(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.deployment = keyed_deployment(self.dir)

    def tearDown(self):
        self.tmp.cleanup()

    def _open(self, bundle=None):
        return SimulatedEnclave(bundle or self.deployment.bundle_path, self.deployment.key_store_path, TEST_KEY)

    def _substitute(self) -> Path:
        """Fresh weights written under the victim's header."""
        path = self.dir / "substitute.atlm"
        other = quantize_model(init_model(SMALL_SHAPE, SeededRng(77)), 8)
        BundleRepo().save(other, path, MODEL_ID)
        return path

    def test_secure_copy_returns_block_span(self):
        with self._open() as enclave:
            start, end = enclave.layout.block_span(1)
            data = self.deployment.bundle_path.read_bytes()
            self.assertEqual(enclave.secure_copy(1), data[start:end])

    def test_authentic_blocks_pass(self):
        with self._open() as enclave:
            results = enclave.verify_blocks(list(range(SMALL_SHAPE.blocks)), workers=2)
        self.assertEqual(list(results), list(range(SMALL_SHAPE.blocks)))
        self.assertTrue(all(result.passed for result in results.values()))

    def test_trigger_comes_from_key_store(self):
        with self._open() as enclave:
            trigger = enclave.decrypt_trigger()
        self.assertEqual(trigger.tokens.tolist(), self.deployment.trigger.tokens.tolist())

    def test_substitute_authenticates_then_fails(self):
        """Same header, different weights: the key store opens and the WER check rejects."""
        with self._open(self._substitute()) as enclave:
            results = enclave.verify_blocks(list(range(SMALL_SHAPE.blocks)))
        self.assertFalse(any(result.passed for result in results.values()))

    def test_other_architecture_fails_authentication(self):
        path = self.dir / "int4.atlm"
        BundleRepo().save(quantize_model(init_model(SMALL_SHAPE, SeededRng(1)), 4), path, MODEL_ID)
        with self.assertRaises(KeyStoreAuthenticationError):
            self._open(path)

    def test_verification_is_memoized_by_content(self):
        with self._open() as enclave:
            enclave.verify_blocks([0, 1])
            enclave.verify_blocks([0, 1])
            self.assertEqual(enclave.cache.misses, 2)
            self.assertEqual(enclave.cache.hits, 2)

    def test_cancellation_skips_queued_blocks(self):
        """One worker and a failing first block: the rest are never verified."""
        with self._open(self._substitute()) as enclave:
            with patch.object(enclave, "verify", wraps=enclave.verify) as verify:
                results = enclave.verify_blocks([0, 1, 2, 3], workers=1, cancel_on_failure=True)
        self.assertEqual(list(results), [0])
        self.assertEqual(verify.call_count, 1)

    def test_cancellation_is_logged_through_project_logger(self):
        with self._open(self._substitute()) as enclave:
            with self.assertLogs("apis.simulated_enclave", level="DEBUG") as logs:
                enclave.verify_blocks([0, 1, 2, 3], workers=1, cancel_on_failure=True)
        self.assertTrue(any("cancelled" in line for line in logs.output))
        handlers = simulated_enclave.logger.handlers
        self.assertTrue(any(getattr(handler, "_attest_console", False) for handler in handlers))


if __name__ == "__main__":
    unittest.main()
