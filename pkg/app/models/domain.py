from enum import StrEnum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import DataError


class Modality(StrEnum):
    """Модальность входа айтема."""
    TEXT = "text"
    IMAGE = "image"


class ItemCatalog(BaseModel):
    """Каталог айтемов с сырыми признаками двух модальностей (n_items × n_tokens × width)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    item_ids: List[str] = Field(default_factory=list)
    text_features: np.ndarray = Field(default_factory=lambda: np.zeros((0, 0, 0)))
    image_features: np.ndarray = Field(default_factory=lambda: np.zeros((0, 0, 0)))
    latent_cluster: List[Optional[int]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self):
        seen = set()
        for item_id in self.item_ids:
            if item_id in seen:
                raise DataError(f"Дублирующийся item_id в каталоге: {item_id}")
            seen.add(item_id)
        n = len(self.item_ids)
        if self.text_features.ndim != 3 or self.image_features.ndim != 3:
            raise DataError("Признаки должны иметь форму (n_items, n_tokens, width)")
        if self.text_features.shape[0] != n or self.image_features.shape[0] != n:
            raise DataError(
                f"Число строк признаков ({self.text_features.shape[0]}, "
                f"{self.image_features.shape[0]}) не совпадает с числом айтемов {n}"
            )
        if not self.latent_cluster:
            self.latent_cluster = [None] * n
        elif len(self.latent_cluster) != n:
            raise DataError("Длина latent_cluster не совпадает с числом айтемов")
        return self

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def index(self) -> Dict[str, int]:
        """Позиция айтема в каталоге по его id."""
        return {item_id: i for i, item_id in enumerate(self.item_ids)}

    def features(self, modality: Modality) -> np.ndarray:
        return self.text_features if modality == Modality.TEXT else self.image_features

    def subset(self, indices) -> "ItemCatalog":
        idx = np.asarray(indices, dtype=np.int64)
        return ItemCatalog(
            item_ids=[self.item_ids[i] for i in idx],
            text_features=self.text_features[idx],
            image_features=self.image_features[idx],
            latent_cluster=[self.latent_cluster[i] for i in idx],
        )


class Interaction(BaseModel):
    user_id: str
    item_id: str
    timestamp: int


class InteractionLog(BaseModel):
    """Лог взаимодействий (user, item, timestamp)."""
    records: List[Interaction] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def sequences(self) -> Dict[str, List[str]]:
        """Последовательности по пользователям; равные timestamp — в порядке входа."""
        by_user: Dict[str, List[tuple]] = {}
        for order, rec in enumerate(self.records):
            by_user.setdefault(rec.user_id, []).append((rec.timestamp, order, rec.item_id))
        return {
            user: [item for _, _, item in sorted(rows)]
            for user, rows in by_user.items()
        }

    def check_items(self, catalog: ItemCatalog) -> None:
        """Проверка ссылочной целостности лога и каталога."""
        known = set(catalog.item_ids)
        for rec in self.records:
            if rec.item_id not in known:
                raise DataError(f"Взаимодействие ссылается на неизвестный айтем: {rec.item_id}")


class EmbeddingPair(BaseModel):
    """Адаптированные эмбеддинги одного айтема: вход второго этапа."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    item_id: str
    text: np.ndarray
    image: np.ndarray
