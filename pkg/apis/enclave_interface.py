from abc import ABC, abstractmethod

from domain.models import KeyStore, TriggerSet
from pipeline.watermark.verification import VerificationResult
from repo.bundle_repo import BundleLayout


class EnclaveInterface(ABC):
    """Isolation boundary for verification; a hardware backend implements the same calls."""

    layout: BundleLayout
    key_store: KeyStore

    @abstractmethod
    def secure_copy(self, block_index: int) -> bytes:
        """Copy one block from the staged read-only region into enclave-owned memory."""

    @abstractmethod
    def decrypt_trigger(self) -> TriggerSet:
        pass

    @abstractmethod
    def verify(self, block_index: int, block_bytes: bytes) -> VerificationResult:
        pass

    @abstractmethod
    def verify_blocks(
        self, block_indices: list[int], workers: int = 1, cancel_on_failure: bool = False
    ) -> dict[int, VerificationResult]:
        pass

    @abstractmethod
    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
