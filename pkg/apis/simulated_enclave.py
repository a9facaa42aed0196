import hashlib
import mmap
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from pathlib import Path

from apis.enclave_interface import EnclaveInterface
from caching.cache import CacheDict
from domain.models import TriggerSet
from infraestructure.logging_setup import get_logger
from pipeline.watermark.verification import VerificationResult, verify_block
from repo.bundle_repo import BundleRepo, parse_block
from repo.key_store_repo import KeyStoreRepo

logger = get_logger(__name__)


class StagedRegion:
    """Read-only memory map of the bundle file, shared with the untrusted side."""

    def __init__(self, path: Path):
        self._file = Path(path).open("rb")
        try:
            self._map = mmap.mmap(self._file.fileno(), 0, access=mmap.ACCESS_READ)
        except Exception:
            self._file.close()
            raise

    def read(self, start: int, end: int) -> bytes:
        return bytes(self._map[start:end])

    def close(self) -> None:
        self._map.close()
        self._file.close()


class SimulatedEnclave(EnclaveInterface):
    """
    In-process stand-in for the secure world.

    Opening it authenticates the key store against the bundle header, then maps
    the bundle read-only. Blocks are verified from owned copies only; results
    are memoized by (block id, digest of the copied bytes).
    """

    def __init__(
        self,
        bundle_path: Path,
        key_store_path: Path,
        key: bytes,
        bundle_repo: BundleRepo = None,
        key_store_repo: KeyStoreRepo = None,
        cache: CacheDict = None,
    ):
        self.bundle_path = Path(bundle_path)
        self.bundle_repo = bundle_repo or BundleRepo()
        self.key_store_repo = key_store_repo or KeyStoreRepo(key)

        self.layout = self.bundle_repo.read_layout(self.bundle_path)
        self.key_store = self.key_store_repo.load(key_store_path, self.layout.identity_hash)
        if len(self.key_store) != self.layout.shape.blocks:
            raise ValueError(
                f"key store has {len(self.key_store)} records for a {self.layout.shape.blocks}-block bundle"
            )
        self.region = StagedRegion(self.bundle_path)
        self.cache: CacheDict[tuple[int, str], VerificationResult] = cache if cache is not None else CacheDict()

    def secure_copy(self, block_index: int) -> bytes:
        start, end = self.layout.block_span(block_index)
        return self.region.read(start, end)

    def decrypt_trigger(self) -> TriggerSet:
        return self.key_store.trigger

    def verify(self, block_index: int, block_bytes: bytes) -> VerificationResult:
        digest = hashlib.sha256(block_bytes).hexdigest()

        def compute() -> VerificationResult:
            block = parse_block(block_bytes, self.layout)
            return verify_block(block, self.key_store[block_index])

        return self.cache.get_or_compute((block_index, digest), compute)

    def verify_blocks(
        self, block_indices: list[int], workers: int = 1, cancel_on_failure: bool = False
    ) -> dict[int, VerificationResult]:
        """
        Verify on a pool bounded by `workers`. With `cancel_on_failure`, the first
        failing block sets a shared flag; queued blocks then return without work.
        Results are keyed and ordered by block id.
        """
        cancelled = threading.Event()

        def task(index: int) -> VerificationResult | None:
            if cancelled.is_set():
                return None
            result = self.verify(index, self.secure_copy(index))
            if cancel_on_failure and not result.passed:
                cancelled.set()
            return result

        results: dict[int, VerificationResult] = {}
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            pending = {pool.submit(task, index): index for index in block_indices}
            while pending:
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                for future in done:
                    index = pending.pop(future)
                    if future.cancelled():
                        continue
                    result = future.result()
                    if result is not None:
                        results[index] = result
                if cancelled.is_set():
                    for future in pending:
                        future.cancel()

        if cancelled.is_set():
            logger.debug("Verification cancelled after a failing block")
        return dict(sorted(results.items()))

    def close(self) -> None:
        self.region.close()
