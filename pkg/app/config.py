from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Настройки процесса (переопределяются переменными окружения R0_*)"""

    model_config = SettingsConfigDict(env_prefix="R0_", env_file=".env", extra="ignore")

    # Service
    service_name: str = "r0-desk"
    service_version: str = "1.0.0"

    # Outputs
    output_root: Path = Path("runs")
    log_level: str = "INFO"
    # Пишем реальное время итераций в RunLog (ломает побайтовую воспроизводимость)
    record_wall_clock: bool = False

    # Numerics
    eps_floor: float = Field(1e-8, gt=0)
    grid_budget: int = 10_000_000
    torch_threads: int = 1


settings = Settings()


def resolve_output_dir(path: str | Path) -> Path:
    """Относительные пути вывода считаются от output_root"""
    path = Path(path)
    if path.is_absolute():
        return path
    return settings.output_root / path
