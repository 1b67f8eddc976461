import hashlib
import os
import tempfile
from pathlib import Path
from typing import Union

from app.exceptions import ArtifactNotFoundError

PathLike = Union[str, Path]


class BaseDAO:
    """Базовый DAO для файловых артефактов: атомарная запись, чтение, хэши"""

    def write_bytes(self, path: PathLike, data: bytes) -> Path:
        """Записать файл атомарно (временный файл + rename)"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        return path

    def write_text(self, path: PathLike, text: str) -> Path:
        return self.write_bytes(path, text.encode("utf-8"))

    def read_bytes(self, path: PathLike) -> bytes:
        """Прочитать файл целиком"""
        path = Path(path)
        if not path.is_file():
            raise ArtifactNotFoundError(f"file not found: {path}", path=str(path))
        return path.read_bytes()

    def read_text(self, path: PathLike) -> str:
        return self.read_bytes(path).decode("utf-8")

    def sha256(self, path: PathLike) -> str:
        return hashlib.sha256(self.read_bytes(path)).hexdigest()
