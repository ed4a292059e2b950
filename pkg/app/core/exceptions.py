"""Кастомные исключения приложения."""


class AppError(Exception):
    """Базовое исключение приложения. Все наследники несут exit_code процесса."""
    exit_code: int = 1


class ConfigError(AppError):
    """Невалидный конфиг запуска или флаг командной строки."""
    exit_code = 2


class DataError(AppError):
    """Битые входные данные: каталог или лог взаимодействий."""
    exit_code = 3


class DivergenceError(AppError):
    """Лосс стал нечисловым (NaN/Inf) во время обучения."""
    exit_code = 4

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ProvenanceError(AppError):
    """Хэш конфигурации входного артефакта не совпадает с ожидаемым."""
    exit_code = 5

    def __init__(self, artifact: str, expected: str, found: str):
        super().__init__(
            f"Артефакт {artifact} собран с другой конфигурацией: "
            f"ожидался хэш {expected}, в файле {found}"
        )
        self.expected = expected
        self.found = found


class StoreError(AppError):
    """Файл артефакта повреждён, обрезан или несовместим по версии."""
    exit_code = 6


class ShapeError(AppError):
    """Несовпадение размерностей."""
    exit_code = 7


class UnknownModalityError(AppError):
    """Модальность не зарегистрирована в адаптере."""
    exit_code = 7


class SiteNotFoundError(AppError):
    """Точка вставки адаптера с таким именем не найдена."""
    exit_code = 7


class NumericsError(AppError):
    """Нарушено предусловие численного примитива."""
    exit_code = 7


class FrozenWeightsError(AppError):
    """Веса замороженного энкодера изменились за время обучения адаптеров."""
    exit_code = 7


class ArtifactExistsError(AppError):
    """Выходной файл уже существует, а --force не указан."""
    exit_code = 8
