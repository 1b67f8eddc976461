import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from app.repositories.base_dao import BaseDAO, PathLike

logger = logging.getLogger(__name__)


def _canonical(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


class ReportDAO(BaseDAO):
    """Отчеты (JSON lines, текстовые таблицы) и манифесты команд"""

    def save_jsonl(self, path: PathLike, records: List[Dict[str, Any]]):
        return self.write_text(path, "".join(_canonical(r) + "\n" for r in records))

    def load_jsonl(self, path: PathLike) -> List[Dict[str, Any]]:
        return [json.loads(line) for line in self.read_text(path).splitlines() if line.strip()]

    def save_table(self, path: PathLike, rows: List[Dict[str, Any]]):
        """Человекочитаемая таблица метрик"""
        frame = pd.DataFrame(rows)
        return self.write_text(path, frame.to_string(index=False, float_format=lambda v: f"{v:.6f}") + "\n")

    def save_manifest(self, out_dir: PathLike, command: str, config_hash: str, seeds: Dict[str, int],
                      artifacts: Dict[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
        """manifest.json: хэш конфигурации, сиды, пути и sha256 артефактов"""
        out_dir = Path(out_dir)
        manifest = {
            "command": command,
            "config_hash": config_hash,
            "seeds": seeds,
            "artifacts": {
                name: {"path": Path(path).relative_to(out_dir).as_posix() if Path(path).is_relative_to(out_dir)
                       else Path(path).as_posix(), "sha256": self.sha256(path)}
                for name, path in sorted(artifacts.items())
            },
        }
        if extra:
            manifest.update(extra)
        path = self.write_text(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        logger.info(f"Manifest written: {path}")
        return path
