"""
Разбор файлов конфигурации запуска.

Формат: строки key=value, вложенность через точку (dataset.name=mixture),
числовой сегмент строит список (reward.0.name=mode_proximity). Значения:
числа, true/false, строки, списки через запятую (1,1) и списки точек через
точку с запятой (1,1; -1,1). # начинает комментарий.
"""
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

from app.exceptions import ArtifactNotFoundError, ConfigError
from app.models.schemas import RunConfig, TrainConfig

logger = logging.getLogger(__name__)


def parse_scalar(text: str) -> Any:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str) -> Any:
    text = text.strip()
    if ";" in text:
        return [[parse_scalar(v.strip()) for v in point.split(",")] for point in text.split(";") if point.strip()]
    if "," in text:
        return [parse_scalar(v.strip()) for v in text.split(",")]
    return parse_scalar(text)


def _listify(node: Any, path: str) -> Any:
    """Словари с ключами 0..n-1 превращаются в списки"""
    if not isinstance(node, dict):
        return node
    node = {key: _listify(value, f"{path}.{key}" if path else key) for key, value in node.items()}
    if node and all(key.isdigit() for key in node):
        indices = sorted(int(key) for key in node)
        if indices != list(range(len(indices))):
            raise ConfigError(f"list indices under '{path}' must be 0..{len(indices) - 1}", key=path)
        return [node[str(i)] for i in indices]
    return node


def parse_config_text(text: str) -> Dict[str, Any]:
    """Текст конфигурации -> вложенный словарь"""
    tree: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key or any(not part for part in key.split(".")):
            raise ConfigError(f"line {number}: expected key=value, got '{raw.strip()}'", line=number)
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"line {number}: '{part}' is already a value", line=number, key=key)
            node = child
        if parts[-1] in node:
            raise ConfigError(f"line {number}: duplicate key '{key}'", line=number, key=key)
        node[parts[-1]] = parse_value(value)
    return _listify(tree, "")


def load_run_config(path: Path, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Прочитать и проверить конфигурацию; --seed и --out перекрывают файл"""
    path = Path(path)
    if not path.is_file():
        raise ArtifactNotFoundError(f"config file not found: {path}", path=str(path))
    tree = parse_config_text(path.read_text(encoding="utf-8"))
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["out"] = out
    try:
        config = RunConfig(**tree)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        raise ConfigError(f"invalid config key '{key}': {error['msg']}", key=key)
    logger.info(f"Loaded config {path} (seed={config.seed}, out={config.out})")
    return config


def config_hash(config: RunConfig) -> str:
    """sha256 канонического JSON конфигурации"""
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()


def require(config: RunConfig, key: str) -> Any:
    """Значение обязательного раздела или ConfigError с его именем"""
    value = getattr(config, key)
    if value is None or value == []:
        raise ConfigError(f"missing required key: {key}", key=key)
    return value


def train_config(config: RunConfig) -> TrainConfig:
    """TrainConfig из разделов train + reward; ошибки проверки - ConfigError"""
    try:
        return config.train_config()
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(["train", *(str(part) for part in error["loc"])]) if error["loc"] else "train"
        raise ConfigError(f"invalid training setup '{key}': {error['msg']}", key=key)
