from environs import Env
import logging
import os

from app.core.exceptions import ConfigError


env = Env()
env.read_env()


def _bool(key: str, default: bool = False) -> bool:
    """Читает булеву переменную окружения с защитой от невалидных значений."""
    raw = os.getenv(key)
    if raw is None or raw.strip() == "":
        return default
    try:
        return env.bool(key, default)
    except Exception:
        return default


class Config:
    DEBUG = _bool("DEBUG", False)

    # Базовая директория артефактов, если не задан --out
    DATA_DIR = env.str("SDA_DATA_DIR", "output")
    LOG_LEVEL = env.str("SDA_LOG_LEVEL", "INFO").upper()

    # Потоки для предрасчёта эмбеддингов (store.embed_catalog)
    WORKERS = env.int("SDA_WORKERS", 1)

    def validate(self) -> None:
        """Проверяет согласованность настроек окружения."""
        if self.WORKERS < 1:
            raise ConfigError(f"SDA_WORKERS должен быть >= 1, получено {self.WORKERS}")
        if not isinstance(logging.getLevelName(self.LOG_LEVEL), int):
            raise ConfigError(f"Неизвестный уровень логирования SDA_LOG_LEVEL={self.LOG_LEVEL}")

    @property
    def log_level(self) -> str:
        return "DEBUG" if self.DEBUG else self.LOG_LEVEL


config = Config()
