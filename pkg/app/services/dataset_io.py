"""Чтение и запись каталога (JSONL) и лога взаимодействий (CSV user_id,item_id,timestamp)."""

import io
import json
import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from app.core.exceptions import DataError
from app.models.domain import Interaction, InteractionLog, ItemCatalog
from app.services.store import atomic_write_text

log = logging.getLogger(__name__)

INTERACTION_COLUMNS = ["user_id", "item_id", "timestamp"]
CATALOG_KEYS = ("item_id", "text_features", "image_features")


def _token_matrix(value, path: Path, lineno: int, key: str) -> np.ndarray:
    try:
        m = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}:{lineno}: {key} не является матрицей чисел") from e
    if m.ndim != 2:
        raise DataError(f"{path}:{lineno}: {key} должен быть матрицей токенов, получена размерность {m.ndim}")
    if not np.all(np.isfinite(m)):
        raise DataError(f"{path}:{lineno}: {key} содержит NaN/Inf")
    return m


def load_catalog(path: str | Path) -> ItemCatalog:
    """
    JSONL: по объекту на строку. Пустые строки пропускаются; ошибка формата —
    DataError с номером строки. Формы признаков одинаковы для всех айтемов.
    """
    path = Path(path)
    ids: List[str] = []
    text, image, clusters = [], [], []
    seen = {}
    if not path.exists():
        raise DataError(f"Файл каталога не найден: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: некорректный JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: ожидался JSON-объект")
            missing = [k for k in CATALOG_KEYS if k not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: нет полей {', '.join(missing)}")

            item_id = str(obj["item_id"])
            if item_id in seen:
                raise DataError(f"{path}:{lineno}: дублирующийся item_id {item_id} (впервые в строке {seen[item_id]})")
            seen[item_id] = lineno

            t = _token_matrix(obj["text_features"], path, lineno, "text_features")
            v = _token_matrix(obj["image_features"], path, lineno, "image_features")
            if text and (t.shape != text[0].shape or v.shape != image[0].shape):
                raise DataError(
                    f"{path}:{lineno}: формы признаков {t.shape}/{v.shape} отличаются от "
                    f"{text[0].shape}/{image[0].shape}"
                )
            cluster = obj.get("latent_cluster")
            if cluster is not None and not isinstance(cluster, int):
                raise DataError(f"{path}:{lineno}: latent_cluster должен быть целым или null")

            ids.append(item_id)
            text.append(t)
            image.append(v)
            clusters.append(cluster)

    if not ids:
        log.warning(f"Каталог {path} пуст")
        return ItemCatalog()
    catalog = ItemCatalog(item_ids=ids, text_features=np.stack(text), image_features=np.stack(image),
                          latent_cluster=clusters)
    log.info(f"Загружен каталог {path}: {len(catalog)} айтемов")
    return catalog


def load_interactions(path: str | Path, catalog: Optional[ItemCatalog] = None) -> InteractionLog:
    """
    CSV с заголовком user_id,item_id,timestamp. Пустой файл — пустой лог.
    При переданном каталоге проверяется ссылочная целостность.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Файл взаимодействий не найден: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        log.warning(f"Файл взаимодействий {path} пуст")
        return InteractionLog()
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: некорректный CSV: {e}") from e

    if list(df.columns) != INTERACTION_COLUMNS:
        raise DataError(f"{path}:1: ожидался заголовок {','.join(INTERACTION_COLUMNS)}, получено {','.join(df.columns)}")

    known = set(catalog.item_ids) if catalog is not None else None
    records = []
    # строка 1 — заголовок
    for lineno, (user_id, item_id, ts) in enumerate(df.itertuples(index=False, name=None), start=2):
        if not user_id or not item_id or not ts:
            raise DataError(f"{path}:{lineno}: пустое поле")
        try:
            timestamp = int(ts)
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: timestamp должен быть целым, получено {ts!r}") from e
        if known is not None and item_id not in known:
            raise DataError(f"{path}:{lineno}: неизвестный айтем {item_id}")
        records.append(Interaction(user_id=user_id, item_id=item_id, timestamp=timestamp))

    log.info(f"Загружено {len(records)} взаимодействий из {path}")
    return InteractionLog(records=records)


def save_catalog(catalog: ItemCatalog, path: str | Path) -> Path:
    lines = []
    for i, item_id in enumerate(catalog.item_ids):
        lines.append(json.dumps({
            "item_id": item_id,
            "text_features": catalog.text_features[i].tolist(),
            "image_features": catalog.image_features[i].tolist(),
            "latent_cluster": catalog.latent_cluster[i],
        }, ensure_ascii=False))
    path = atomic_write_text(path, "".join(line + "\n" for line in lines))
    log.info(f"Сохранён каталог: {path} ({len(catalog)} айтемов)")
    return path


def save_interactions(interactions: InteractionLog, path: str | Path) -> Path:
    df = pd.DataFrame([r.model_dump() for r in interactions.records], columns=INTERACTION_COLUMNS)
    buffer = io.StringIO()
    df.to_csv(buffer, index=False)
    path = atomic_write_text(path, buffer.getvalue())
    log.info(f"Сохранён лог взаимодействий: {path} ({len(interactions)} записей)")
    return path
