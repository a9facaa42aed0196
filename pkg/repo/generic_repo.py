from pathlib import Path


class GenericRepo:
    def __init__(self, root: Path | None = None):
        self.root = Path(root) if root is not None else None

    def resolve(self, path) -> Path:
        path = Path(path)
        if self.root is not None and not path.is_absolute():
            return self.root / path
        return path
