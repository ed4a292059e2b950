"""Документ конфигурации запуска: секции данных, энкодера, адаптации, рекомендера, оценки."""

import hashlib
import json
import math
import tomllib
from pathlib import Path
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.exceptions import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthConfig(_Section):
    """Параметры синтетического датасета с управляемым рассогласованием модальностей."""
    n_items: int = Field(500, ge=1)
    n_users: int = Field(200, ge=1)
    n_clusters: int = Field(10, ge=1)
    n_tokens: int = Field(8, ge=1)
    feature_dim: int = Field(16, ge=1)
    latent_dim: int = Field(8, ge=2, description="Размерность латентного пространства")
    misalignment_rotation_angle: float = Field(
        math.pi / 2, ge=0.0, le=math.pi, description="Угол поворота латента для картинок (рад)"
    )
    tail_exponent: float = Field(1.0, ge=0.0, description="Показатель Ципфа популярности")
    target_tail_fraction: Optional[float] = Field(
        0.3, ge=0.0, le=1.0, description="Минимальная доля хвостовых айтемов; None — не подбирать"
    )
    noise_scale: float = Field(0.1, ge=0.0)
    cluster_spread: float = Field(0.35, ge=0.0, description="Разброс айтемов вокруг центра кластера")
    min_sequence_length: int = Field(5, ge=3)
    max_sequence_length: int = Field(20, ge=3)
    stay_probability: float = Field(0.8, ge=0.0, le=1.0, description="Шанс остаться в кластере предыдущего айтема")
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.min_sequence_length > self.max_sequence_length:
            raise ValueError("min_sequence_length больше max_sequence_length")
        return self


class EncoderConfig(_Section):
    """Замороженный двухбашенный энкодер."""
    n_layers: int = Field(2, ge=1)
    hidden_dim: int = Field(64, ge=1)
    n_tokens: int = Field(8, ge=1)
    input_dim: int = Field(16, ge=1)
    d_m: int = Field(32, ge=1)
    normalize_embeddings: bool = True
    seed: Optional[int] = None


class AdaptConfig(_Section):
    """Первый этап: обучение только параметров адаптера под лосс выравнивания."""
    loss: Literal["cmsa", "infonce"] = "cmsa"
    adapter: Literal["moda", "lora", "none"] = "moda"
    batch_size: int = Field(64, ge=2)
    steps: int = Field(1000, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    tau: float = Field(0.07, gt=0.0)
    rank: int = Field(8, ge=1)
    n_experts: int = Field(4, ge=1)
    gate_dim: int = Field(8, ge=1)
    gate_activation: Literal["softmax", "identity"] = "softmax"
    teacher_temp_mode: Literal["multiply", "divide"] = "multiply"
    detach_teacher: bool = True
    target_sites: List[str] = Field(default_factory=lambda: ["q_proj", "k_proj"])
    grad_clip: Optional[float] = Field(5.0, gt=0.0)
    log_every: int = Field(100, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_rank(self):
        if self.rank % self.n_experts != 0:
            raise ValueError(f"rank={self.rank} не делится на n_experts={self.n_experts}")
        return self


class RecConfig(_Section):
    """Второй этап: рекомендер поверх предрасчитанных эмбеддингов."""
    model: Literal["seq", "bpr"] = "seq"
    fusion: Literal["concat_linear", "text_only", "image_only", "id_only"] = "concat_linear"
    d_r: int = Field(64, ge=1)
    epochs: int = Field(20, ge=0)
    learning_rate: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(256, ge=1, description="Размер батча троек для BPR")
    seq_batch_size: int = Field(16, ge=1, description="Последовательностей в батче SASRec-lite")
    max_len: int = Field(50, ge=2)
    n_negatives: int = Field(100, ge=1)
    l2: float = Field(0.0, ge=0.0)
    init_std: float = Field(0.02, ge=0.0)
    seed: Optional[int] = None


class EvalConfig(_Section):
    k: int = Field(10, ge=1)
    tail_threshold: int = Field(4, ge=1)
    per_user_csv: bool = True


class DiagnoseConfig(_Section):
    """Анализ конфликта градиентов модальностей."""
    sites: Optional[List[str]] = Field(None, description="None — q_proj/k_proj последнего слоя")
    adapters: List[Literal["lora", "moda"]] = Field(default_factory=lambda: ["lora", "moda"])
    n_seeds: int = Field(10, ge=1)
    probe_batch_size: int = Field(32, ge=2)
    adapt_steps: int = Field(200, ge=0, description="Шагов первого этапа до замера")
    csv: bool = True
    seed: Optional[int] = None


class RunConfig(_Section):
    """Единый документ запуска; неизвестные ключи запрещены."""
    seed: int = 42
    out_dir: Optional[str] = None
    data: SynthConfig = Field(default_factory=SynthConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    rec: RecConfig = Field(default_factory=RecConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    diagnose: DiagnoseConfig = Field(default_factory=DiagnoseConfig)

    @model_validator(mode="after")
    def _resolve_seeds(self):
        # Секции без явного seed наследуют верхнеуровневый со сдвигом
        offsets = {"data": 0, "encoder": 0, "adapt": 1, "rec": 2, "diagnose": 3}
        for name, offset in offsets.items():
            section = getattr(self, name)
            if section.seed is None:
                section.seed = self.seed + offset
        return self

    @classmethod
    def load(cls, path: Optional[str] = None, seed: Optional[int] = None,
             out_dir: Optional[str] = None, overrides: Optional[List[str]] = None) -> "RunConfig":
        """Читает TOML, применяет флаги CLI поверх значений файла и валидирует."""
        raw: dict[str, Any] = {}
        if path:
            try:
                with open(path, "rb") as f:
                    raw = tomllib.load(f)
            except FileNotFoundError as e:
                raise ConfigError(f"Файл конфигурации не найден: {path}") from e
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"Некорректный TOML в {path}: {e}") from e

        for item in overrides or []:
            _apply_override(raw, item)
        if seed is not None:
            raw["seed"] = seed
            # Явный --seed перекрывает сиды секций из файла
            for section in ("data", "encoder", "adapt", "rec", "diagnose"):
                if isinstance(raw.get(section), dict):
                    raw[section].pop("seed", None)
        if out_dir is not None:
            raw["out_dir"] = out_dir

        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"Невалидная конфигурация: {e}") from e


def _apply_override(raw: dict, item: str) -> None:
    """Применяет `section.key=value`; значение разбирается как скаляр TOML."""
    if "=" not in item:
        raise ConfigError(f"Ожидалось section.key=value, получено: {item}")
    key, value = item.split("=", 1)
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    target = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError(f"{key}: {part} не является секцией")
    target[parts[-1]] = parsed


def config_hash(*sections: BaseModel) -> str:
    """sha256 канонического JSON секций; используется в заголовках provenance."""
    payload = [s.model_dump(mode="json") for s in sections]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def data_hash(cfg: RunConfig) -> str:
    return config_hash(cfg.data)


def adapt_hash(cfg: RunConfig) -> str:
    return config_hash(cfg.data, cfg.encoder, cfg.adapt)


def rec_hash(cfg: RunConfig) -> str:
    return config_hash(cfg.data, cfg.encoder, cfg.adapt, cfg.rec)
