import os
import secrets
from pathlib import Path

from dotenv import load_dotenv

KEY_PATH_ENV = "ATTEST_KEYSTORE_KEY_PATH"
KEY_BYTES = 32


class KeyMaterialManager:
    """
    Resolves the key-store encryption key. An explicit path wins; otherwise the
    path comes from ATTEST_KEYSTORE_KEY_PATH, which may be set in the project .env.
    """

    def __init__(self, key_path: Path | str | None = None, env_file: Path | None = None):
        project_root = Path(__file__).resolve().parents[1]
        load_dotenv(env_file or project_root / ".env")
        self._explicit_path = Path(key_path) if key_path else None
        self._key: bytes | None = None

    @property
    def key_path(self) -> Path:
        if self._explicit_path is not None:
            return self._explicit_path
        from_env = os.getenv(KEY_PATH_ENV)
        if not from_env:
            raise KeyMaterialError(f"no key file given and {KEY_PATH_ENV} is not set")
        return Path(from_env)

    @property
    def key(self) -> bytes:
        if self._key is None:
            self._key = self._read_key(self.key_path)
        return self._key

    @staticmethod
    def _read_key(path: Path) -> bytes:
        try:
            text = path.read_text(encoding="ascii").strip()
        except (OSError, UnicodeDecodeError) as e:
            raise KeyMaterialError(f"cannot read key file {path}: {e}") from e
        try:
            key = bytes.fromhex(text)
        except ValueError:
            raise KeyMaterialError(f"key file {path} is not hex encoded") from None
        if len(key) != KEY_BYTES:
            raise KeyMaterialError(f"key file {path} holds {len(key)} bytes, expected {KEY_BYTES}")
        return key

    @staticmethod
    def generate(path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(secrets.token_hex(KEY_BYTES) + "\n", encoding="ascii")
        path.chmod(0o600)
        return path


class KeyMaterialError(Exception):
    pass
