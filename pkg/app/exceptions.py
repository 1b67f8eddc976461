"""
Иерархия ошибок r0-desk.

Каждая ошибка несет машинный код, текстовое описание и код выхода процесса,
по которому CLI различает классы сбоев.
"""
from typing import Any, Dict, Optional


class R0Error(Exception):
    """Базовая ошибка приложения"""

    code = "internal_error"
    exit_code = 1

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context: Dict[str, Any] = context

    def to_dict(self) -> Dict[str, Any]:
        payload = {"code": self.code, "detail": self.detail}
        payload.update({k: v for k, v in self.context.items() if _is_plain(v)})
        return payload


class InvalidArgumentError(R0Error, ValueError):
    """Нарушено предусловие операции"""

    code = "invalid_argument"
    exit_code = 6


class ConfigError(R0Error):
    """Конфигурация запуска не разобрана или не прошла проверку"""

    code = "config_error"
    exit_code = 7

    def __init__(self, detail: str, line: Optional[int] = None, key: Optional[str] = None):
        super().__init__(detail, line=line, key=key)
        self.line = line
        self.key = key


class ArtifactNotFoundError(R0Error):
    """Нет нужного файла (чекпоинта, сэмплов, конфига)"""

    code = "file_error"
    exit_code = 3


class CheckpointFormatError(R0Error):
    """Файл чекпоинта поврежден или имеет чужой формат"""

    code = "format_error"
    exit_code = 3


class SamplesParseError(R0Error):
    """CSV с сэмплами не разбирается"""

    code = "parse_error"
    exit_code = 3

    def __init__(self, detail: str, row: Optional[int] = None):
        super().__init__(detail, row=row)
        self.row = row


class NumericError(R0Error):
    """Нечисловое значение (nan/inf) в вычислениях"""

    code = "numeric_error"
    exit_code = 4

    def __init__(self, detail: str, term: Optional[str] = None):
        super().__init__(detail, term=term)
        self.term = term


class TrainingDivergedError(R0Error):
    """Обучение разошлось: loss или градиент стали нечисловыми"""

    code = "training_diverged"
    exit_code = 5

    def __init__(self, detail: str, iteration: int, last_state: Optional[Dict[str, Any]] = None):
        super().__init__(detail, iteration=iteration)
        self.iteration = iteration
        # Последнее конечное состояние параметров (state_dict) для сохранения
        self.last_state = last_state


class PretrainValidationError(R0Error):
    """Предобученная сеть не прошла проверку точности"""

    code = "validation_failed"
    exit_code = 8

    def __init__(self, detail: str, error: float, tolerance: float):
        super().__init__(detail, error=error, tolerance=tolerance)
        self.error = error
        self.tolerance = tolerance


def _is_plain(value: Any) -> bool:
    return value is None or isinstance(value, (str, int, float, bool))
