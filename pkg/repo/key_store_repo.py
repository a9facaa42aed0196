import os
import struct
from pathlib import Path
from typing import BinaryIO

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from pydantic import ValidationError

from apis.schemas.key_store import KeyStoreData
from domain.models import KeyStore
from repo.base import file_op
from repo.generic_repo import GenericRepo

MAGIC = b"ATKS"
VERSION = 1
HEADER = struct.Struct("<4sH32s")
NONCE_SIZE = 12
KEY_SIZE = 32


def associated_data(identity_hash: str) -> bytes:
    return HEADER.pack(MAGIC, VERSION, bytes.fromhex(identity_hash))


class KeyStoreRepo(GenericRepo):
    """AES-256-GCM sealed key store bound to a bundle identity hash."""

    def __init__(self, key: bytes, root: Path | None = None):
        super().__init__(root)
        if len(key) != KEY_SIZE:
            raise ValueError(f"key-store key must be {KEY_SIZE} bytes, got {len(key)}")
        self._aead = AESGCM(key)

    def seal(self, store: KeyStore) -> bytes:
        plaintext = KeyStoreData.from_domain(store).model_dump_json().encode("utf-8")
        header = associated_data(store.identity_hash)
        nonce = os.urandom(NONCE_SIZE)
        return header + nonce + self._aead.encrypt(nonce, plaintext, header)

    def open(self, blob: bytes, identity_hash: str) -> KeyStore:
        if len(blob) < HEADER.size + NONCE_SIZE or blob[:4] != MAGIC:
            raise KeyStoreAuthenticationError("not a key store")
        _, version, bound_identity = HEADER.unpack_from(blob, 0)
        if version != VERSION:
            raise KeyStoreAuthenticationError(f"unsupported key-store version {version}")
        if bound_identity.hex() != identity_hash:
            raise KeyStoreAuthenticationError("key store is bound to a different model bundle")

        nonce = blob[HEADER.size : HEADER.size + NONCE_SIZE]
        ciphertext = blob[HEADER.size + NONCE_SIZE :]
        try:
            plaintext = self._aead.decrypt(nonce, ciphertext, associated_data(identity_hash))
        except InvalidTag:
            raise KeyStoreAuthenticationError("authentication tag mismatch (wrong key or modified file)") from None

        try:
            store = KeyStoreData.model_validate_json(plaintext).to_domain()
        except (ValidationError, ValueError) as e:
            raise KeyStoreFormatError(str(e)) from e
        if store.identity_hash != identity_hash:
            raise KeyStoreAuthenticationError("payload identity disagrees with its header")
        return store

    def save(self, store: KeyStore, path) -> None:
        self._write(path, self.seal(store))

    @file_op
    def _write(self, handle: BinaryIO, path: Path, blob: bytes) -> None:
        handle.write(blob)

    def load(self, path, identity_hash: str) -> KeyStore:
        return self.open(self.resolve(path).read_bytes(), identity_hash)

    def remove(self, path) -> None:
        self.resolve(path).unlink(missing_ok=True)


class KeyStoreAuthenticationError(Exception):
    pass


class KeyStoreFormatError(ValueError):
    pass
