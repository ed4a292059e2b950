"""Артефакты на диске: таблицы эмбеддингов, чекпойнты параметров, атомарная запись.

Бинарный формат: 4 байта длины заголовка (little-endian), JSON-заголовок
(ключи отсортированы, компактные разделители), затем полезная нагрузка
little-endian: float32 для эмбеддингов, float64 для чекпойнтов.
"""

import asyncio
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.core.exceptions import ArtifactExistsError, ProvenanceError, StoreError
from app.models.domain import ItemCatalog, Modality
from app.services.backbone import FrozenEncoder
from app.services.moda import AdapterSet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EMBEDDINGS_FORMAT = "sda-embeddings"
CHECKPOINT_FORMAT = "sda-checkpoint"
EMBED_CHUNK = 64

_LEN = struct.Struct("<I")


# ====================== ЗАПИСЬ ============================

def ensure_writable(path: str | Path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ArtifactExistsError(f"Файл уже существует: {path} (используйте --force)")
    return path


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    """Временный файл в той же директории, затем os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _pack(header: Dict[str, Any], payload: bytes) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return _LEN.pack(len(blob)) + blob + payload


def _unpack(data: bytes, path: Path, expected_format: str) -> Tuple[Dict[str, Any], bytes]:
    if len(data) < _LEN.size:
        raise StoreError(f"{path}: файл обрезан (нет длины заголовка)")
    (size,) = _LEN.unpack_from(data)
    if _LEN.size + size > len(data):
        raise StoreError(f"{path}: файл обрезан (заголовок {size} байт не помещается)")
    try:
        header = json.loads(data[_LEN.size:_LEN.size + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StoreError(f"{path}: повреждённый заголовок: {e}") from e
    if not isinstance(header, dict) or header.get("format") != expected_format:
        raise StoreError(f"{path}: не является файлом {expected_format}")
    if header.get("version") != FORMAT_VERSION:
        raise StoreError(f"{path}: версия формата {header.get('version')}, поддерживается {FORMAT_VERSION}")
    return header, data[_LEN.size + size:]


def _read(path: str | Path) -> Tuple[Path, bytes]:
    path = Path(path)
    try:
        return path, path.read_bytes()
    except FileNotFoundError as e:
        raise StoreError(f"Артефакт не найден: {path}") from e


# ====================== ЭМБЕДДИНГИ ============================

@dataclass
class EmbeddingTable:
    """Матрица |I| × d_m одной модальности; строки в порядке item_ids."""
    item_ids: List[str]
    modality: Modality
    matrix: np.ndarray
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.item_ids):
            raise StoreError(f"Таблица {self.modality}: {self.matrix.shape} строк на {len(self.item_ids)} айтемов")

    @property
    def d_m(self) -> int:
        return self.matrix.shape[1]


def save_embeddings(table: EmbeddingTable, path: str | Path) -> Path:
    header = {
        "format": EMBEDDINGS_FORMAT,
        "version": FORMAT_VERSION,
        "modality": table.modality.value,
        "item_ids": table.item_ids,
        "rows": len(table.item_ids),
        "d_m": table.d_m,
        "dtype": "<f4",
        "provenance": table.provenance,
    }
    payload = table.matrix.astype("<f4").tobytes(order="C")
    path = atomic_write_bytes(path, _pack(header, payload))
    log.info(f"Сохранена таблица {table.modality}: {path} ({len(table.item_ids)}×{table.d_m})")
    return path


def load_embeddings(path: str | Path) -> EmbeddingTable:
    path, data = _read(path)
    header, payload = _unpack(data, path, EMBEDDINGS_FORMAT)
    try:
        rows, d_m, item_ids = int(header["rows"]), int(header["d_m"]), list(header["item_ids"])
        modality = Modality(header["modality"])
    except (KeyError, ValueError, TypeError) as e:
        raise StoreError(f"{path}: неполный заголовок таблицы: {e}") from e
    if len(item_ids) != rows:
        raise StoreError(f"{path}: в индексе {len(item_ids)} айтемов, в заголовке rows={rows}")
    expected = rows * d_m * 4
    if len(payload) != expected:
        raise StoreError(
            f"{path}: размер данных {len(payload)} байт не совпадает с {rows}×{d_m} float32 ({expected} байт)"
        )
    matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, d_m).astype(np.float32)
    return EmbeddingTable(item_ids, modality, matrix, dict(header.get("provenance") or {}))


def _embed_chunks(n: int) -> List[Tuple[int, int]]:
    return [(start, min(start + EMBED_CHUNK, n)) for start in range(0, n, EMBED_CHUNK)]


def _encode_chunk(catalog: ItemCatalog, modality: Modality, encoder: FrozenEncoder,
                  adapters: Optional[AdapterSet], bounds: Tuple[int, int]) -> np.ndarray:
    start, end = bounds
    return encoder.encode_batch(catalog.features(modality)[start:end], modality, adapters)


def _tables(catalog: ItemCatalog, chunks: Dict[Modality, List[np.ndarray]], d_m: int,
            provenance: Optional[Dict[str, Any]]) -> Tuple[EmbeddingTable, EmbeddingTable]:
    out = []
    for modality in (Modality.TEXT, Modality.IMAGE):
        parts = chunks[modality]
        matrix = np.vstack(parts) if parts else np.zeros((0, d_m))
        out.append(EmbeddingTable(list(catalog.item_ids), modality, matrix, dict(provenance or {})))
    return out[0], out[1]


def embed_catalog(catalog: ItemCatalog, encoder: FrozenEncoder, adapters: Optional[AdapterSet] = None,
                  provenance: Optional[Dict[str, Any]] = None) -> Tuple[EmbeddingTable, EmbeddingTable]:
    """Эмбеддинги всех айтемов обеими башнями, адаптеры привязаны к константам."""
    chunks: Dict[Modality, List[np.ndarray]] = {}
    for modality in Modality:
        chunks[modality] = [
            _encode_chunk(catalog, modality, encoder, adapters, b)
            for b in _embed_chunks(len(catalog))
        ]
    return _tables(catalog, chunks, encoder.d_m, provenance)


async def embed_catalog_async(catalog: ItemCatalog, encoder: FrozenEncoder,
                              adapters: Optional[AdapterSet] = None,
                              provenance: Optional[Dict[str, Any]] = None,
                              workers: int = 1) -> Tuple[EmbeddingTable, EmbeddingTable]:
    """
    То же, что embed_catalog, но куски по EMBED_CHUNK айтемов считаются в потоках
    (не более workers одновременно). Границы кусков не зависят от workers, порядок сохраняется.
    """
    semaphore = asyncio.Semaphore(max(1, workers))

    async def run(modality: Modality, bounds: Tuple[int, int]) -> np.ndarray:
        async with semaphore:
            return await asyncio.to_thread(_encode_chunk, catalog, modality, encoder, adapters, bounds)

    chunks: Dict[Modality, List[np.ndarray]] = {}
    for modality in Modality:
        tasks = [run(modality, b) for b in _embed_chunks(len(catalog))]
        chunks[modality] = list(await asyncio.gather(*tasks))
    log.info(f"Эмбеддинги посчитаны: {len(catalog)} айтемов, потоков {workers}")
    return _tables(catalog, chunks, encoder.d_m, provenance)


# ====================== ЧЕКПОЙНТЫ ============================

@dataclass
class Checkpoint:
    """Именованные float64-параметры, метаданные и снимок конфигурации."""
    kind: str
    params: Dict[str, np.ndarray]
    meta: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        value = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        blob = value.tobytes(order="C")
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "params": entries,
        "meta": ckpt.meta,
        "config": ckpt.config,
    }
    return _pack(header, b"".join(blobs))


def checkpoint_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Пишет чекпойнт и возвращает его id (sha256 содержимого)."""
    data = checkpoint_bytes(ckpt)
    path = atomic_write_bytes(path, data)
    log.info(f"Сохранён чекпойнт {ckpt.kind}: {path} ({len(ckpt.params)} параметров)")
    return checkpoint_id(data)


def load_checkpoint(path: str | Path) -> Tuple[Checkpoint, str]:
    path, data = _read(path)
    header, payload = _unpack(data, path, CHECKPOINT_FORMAT)
    params: Dict[str, np.ndarray] = {}
    try:
        for entry in header["params"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = int(entry["offset"])
            end = start + count * 8
            if end > len(payload):
                raise StoreError(f"{path}: параметр {entry['name']} выходит за конец файла")
            params[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).astype(np.float64)
        ckpt = Checkpoint(kind=header["kind"], params=params, meta=header.get("meta") or {},
                          config=header.get("config") or {})
    except (KeyError, TypeError, ValueError) as e:
        raise StoreError(f"{path}: неполный заголовок чекпойнта: {e}") from e
    total = sum(v.nbytes for v in params.values())
    if total != len(payload):
        raise StoreError(f"{path}: размер данных {len(payload)} байт, по заголовку {total}")
    return ckpt, checkpoint_id(data)


def adapters_checkpoint(adapters: AdapterSet, encoder: FrozenEncoder, config: Dict[str, Any],
                        provenance: Optional[Dict[str, Any]] = None) -> Checkpoint:
    first = next(iter(adapters.adapters.values()), None)
    meta = {
        "adapter": adapters.kind,
        "sites": list(adapters.adapters),
        "rank": getattr(first, "rank", None),
        "n_experts": getattr(first, "n_experts", None),
        "gate_dim": getattr(first, "gate_dim", None),
        "gate_activation": getattr(first, "gate_activation", None),
        "encoder_hash": encoder.weights_hash(),
        "provenance": dict(provenance or {}),
    }
    return Checkpoint(kind="adapters", params={k: v for k, v in adapters.parameters().items()},
                      meta=meta, config=config)


def restore_adapters(ckpt: Checkpoint, encoder: FrozenEncoder) -> AdapterSet:
    """Набор адаптеров из чекпойнта; энкодер обязан совпадать с тем, на котором учили."""
    if ckpt.kind != "adapters":
        raise StoreError(f"Ожидался чекпойнт адаптеров, получен {ckpt.kind}")
    meta = ckpt.meta
    if meta.get("encoder_hash") != encoder.weights_hash():
        raise ProvenanceError("adapters", encoder.weights_hash(), str(meta.get("encoder_hash")))
    if meta["adapter"] == "none" or not meta["sites"]:
        return AdapterSet(meta["adapter"])
    adapters = AdapterSet.build(
        encoder, meta["adapter"], meta["sites"], rank=meta["rank"] or 8,
        n_experts=meta["n_experts"] or 1, gate_dim=meta["gate_dim"] or 8,
        gate_activation=meta["gate_activation"] or "softmax",
    )
    adapters.load_parameters(ckpt.params)
    return adapters


def check_provenance(artifact: str, found: Dict[str, Any], key: str, expected: str) -> None:
    """Сверка хэша конфигурации, записанного в артефакте, с ожидаемым."""
    value = str(found.get(key))
    if value != expected:
        raise ProvenanceError(artifact, expected, value)
