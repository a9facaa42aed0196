import tempfile
import unittest
from pathlib import Path

import numpy as np

from domain.models import KeyStore
from repo.key_store_repo import HEADER, NONCE_SIZE, KeyStoreAuthenticationError, KeyStoreRepo
from quant.quantizer import quantize_model
from tests.fixtures import TEST_KEY, fitted_keys, small_model, small_trigger

IDENTITY = "ab" * 32
OTHER_IDENTITY = "cd" * 32


class TestKeyStoreRepo(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "keys.atks"
        qmodel = quantize_model(small_model(), 8)
        trigger = small_trigger()
        self.store = KeyStore(
            keys=fitted_keys(qmodel, trigger, bits_per_block=6),
            trigger=trigger,
            bits=8,
            identity_hash=IDENTITY,
            total_bits=24,
        )
        self.repo = KeyStoreRepo(TEST_KEY)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        self.repo.save(self.store, self.path)
        loaded = self.repo.load(self.path, IDENTITY)
        self.assertEqual(len(loaded), len(self.store))
        np.testing.assert_array_equal(loaded.trigger.tokens, self.store.trigger.tokens)
        for original, restored in zip(self.store.keys, loaded.keys):
            np.testing.assert_array_equal(original.signature, restored.signature)
            np.testing.assert_array_equal(original.channels, restored.channels)
            np.testing.assert_array_equal(original.projection, restored.projection)
            self.assertEqual(original.checkpoint_digest, restored.checkpoint_digest)

    def test_wrong_key(self):
        self.repo.save(self.store, self.path)
        with self.assertRaises(KeyStoreAuthenticationError):
            KeyStoreRepo(bytes(32)).load(self.path, IDENTITY)

    def test_bound_to_identity(self):
        """A key store for one bundle identity does not open for another."""
        self.repo.save(self.store, self.path)
        with self.assertRaises(KeyStoreAuthenticationError):
            self.repo.load(self.path, OTHER_IDENTITY)

    def test_tampered_ciphertext(self):
        blob = bytearray(self.repo.seal(self.store))
        blob[HEADER.size + NONCE_SIZE + 5] ^= 0x01
        with self.assertRaises(KeyStoreAuthenticationError):
            self.repo.open(bytes(blob), IDENTITY)

    def test_rewritten_header_fails_tag(self):
        """Swapping the bound identity in the header breaks the tag check."""
        blob = bytearray(self.repo.seal(self.store))
        blob[6 : 6 + 32] = bytes.fromhex(OTHER_IDENTITY)
        with self.assertRaises(KeyStoreAuthenticationError):
            self.repo.open(bytes(blob), OTHER_IDENTITY)

    def test_not_a_key_store(self):
        with self.assertRaises(KeyStoreAuthenticationError):
            self.repo.open(b"hello", IDENTITY)

    def test_fresh_nonce_per_seal(self):
        self.assertNotEqual(self.repo.seal(self.store), self.repo.seal(self.store))

    def test_key_length(self):
        with self.assertRaises(ValueError):
            KeyStoreRepo(b"short")

    def test_empty_signature_slices(self):
        store = KeyStore(
            keys=fitted_keys(quantize_model(small_model(), 8), small_trigger(), bits_per_block=0),
            trigger=self.store.trigger,
            bits=8,
            identity_hash=IDENTITY,
        )
        self.repo.save(store, self.path)
        loaded = self.repo.load(self.path, IDENTITY)
        self.assertEqual(loaded[0].signature.size, 0)
        self.assertEqual(loaded[0].projection.shape, (0, loaded[0].channels.size))


if __name__ == "__main__":
    unittest.main()
