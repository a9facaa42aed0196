import threading
from collections import OrderedDict
from collections.abc import Callable, Hashable
from typing import Generic, TypeVar

K = TypeVar("K", bound=Hashable)
V = TypeVar("V")


class GeneralCache(Generic[K, V]):
    """LRU map shared between worker threads."""

    def __init__(self, max_count: int = 100):
        self._max_count: int = max_count
        self._cache: OrderedDict[K, V] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __contains__(self, key: K) -> bool:
        with self._lock:
            if key not in self._cache:
                return False

            self._cache.move_to_end(key)
            return True

    def __getitem__(self, key: K) -> V:
        with self._lock:
            if key not in self._cache:
                raise KeyError(key)

            self._cache.move_to_end(key)
            return self._cache[key]

    def __len__(self) -> int:
        return len(self._cache)

    def _put(self, key: K, value: V) -> None:
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)

            self._cache[key] = value

            if len(self._cache) > self._max_count:
                self._cache.popitem(last=False)

    def get_or_compute(self, key: K, compute: Callable[[], V]) -> V:
        with self._lock:
            if key in self._cache:
                self.hits += 1
                self._cache.move_to_end(key)
                return self._cache[key]
            self.misses += 1

        # Computed outside the lock; concurrent misses on one key both compute the same value.
        value = compute()
        self._put(key, value)
        return value


class CacheDict(GeneralCache[K, V]):
    def __init__(self, max_count: int = 1000):
        super().__init__(max_count=max_count)

    def __setitem__(self, key: K, value: V) -> None:
        self._put(key, value)
