import unittest
from unittest.mock import MagicMock

from caching.cache import CacheDict, GeneralCache


class TestCache(unittest.TestCase):
    def test_get_or_compute_memoizes(self):
        cache = CacheDict()
        compute = MagicMock(return_value=42)
        self.assertEqual(cache.get_or_compute("a", compute), 42)
        self.assertEqual(cache.get_or_compute("a", compute), 42)
        compute.assert_called_once()
        self.assertEqual((cache.hits, cache.misses), (1, 1))

    def test_evicts_least_recently_used(self):
        cache = GeneralCache(max_count=2)
        cache.get_or_compute("a", lambda: 1)
        cache.get_or_compute("b", lambda: 2)
        self.assertIn("a", cache)
        cache.get_or_compute("c", lambda: 3)
        self.assertIn("a", cache)
        self.assertNotIn("b", cache)
        self.assertEqual(len(cache), 2)

    def test_setitem_and_missing_key(self):
        cache = CacheDict()
        cache["x"] = 1
        self.assertEqual(cache["x"], 1)
        with self.assertRaises(KeyError):
            cache["y"]


if __name__ == "__main__":
    unittest.main()
