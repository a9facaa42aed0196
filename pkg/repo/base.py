import os
import tempfile
from functools import wraps
from pathlib import Path

from repo.generic_repo import GenericRepo


def file_op(method):
    """
    Hand the method an open binary handle on a temp file next to `path`.
    The temp file replaces `path` when the method returns and is removed if it raises.
    """

    @wraps(method)
    def wrapper(self: GenericRepo, path, *args, **kwargs):
        path = self.resolve(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        tmp_path = Path(tmp_name)
        try:
            with os.fdopen(fd, "wb") as handle:
                result = method(self, handle, path, *args, **kwargs)
            os.replace(tmp_path, path)
            return result
        except Exception:
            tmp_path.unlink(missing_ok=True)
            raise

    return wrapper


def append_op(method):
    """Open `path` for appending text, creating parent directories first."""

    @wraps(method)
    def wrapper(self: GenericRepo, path, *args, **kwargs):
        path = self.resolve(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        existed = path.exists() and path.stat().st_size > 0
        with path.open("a", encoding="utf-8", newline="") as handle:
            return method(self, handle, path, existed, *args, **kwargs)

    return wrapper
