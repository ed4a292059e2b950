"""Тесты хранилища артефактов: таблицы эмбеддингов и чекпойнты."""
import asyncio
import os
from pathlib import Path

import numpy as np
import pytest

from app.core.exceptions import ArtifactExistsError, ProvenanceError, StoreError
from app.models.config import EncoderConfig
from app.models.domain import Modality
from app.services.backbone import FrozenEncoder
from app.services.moda import AdapterSet
from app.services.store import (
    EMBEDDINGS_FORMAT,
    FORMAT_VERSION,
    Checkpoint,
    EmbeddingTable,
    _pack,
    adapters_checkpoint,
    check_provenance,
    embed_catalog,
    embed_catalog_async,
    ensure_writable,
    load_checkpoint,
    load_embeddings,
    restore_adapters,
    save_checkpoint,
    save_embeddings,
)
from app.services.synthetic import generate


@pytest.fixture
def table():
    rng = np.random.default_rng(0)
    return EmbeddingTable(["a", "b", "c"], Modality.TEXT, rng.normal(size=(3, 4)), {"adapt_hash": "abc"})


@pytest.fixture
def trained_adapters(small_encoder):
    adapters = AdapterSet.build(small_encoder, "moda", ["layer0.q_proj", "layer1.k_proj"],
                                rank=4, n_experts=2, gate_dim=4)
    rng = np.random.default_rng(1)
    adapters.load_parameters({k: 0.3 * rng.normal(size=v.shape) for k, v in adapters.parameters().items()})
    return adapters


# ====================== ЭМБЕДДИНГИ ============================

def test_embeddings_round_trip(table, temp_dir):
    path = save_embeddings(table, os.path.join(temp_dir, "e.bin"))
    loaded = load_embeddings(path)
    assert loaded.item_ids == table.item_ids
    assert loaded.modality == Modality.TEXT
    assert loaded.matrix.dtype == np.float32
    assert np.array_equal(loaded.matrix, table.matrix)
    assert loaded.provenance == {"adapt_hash": "abc"}


def test_truncated_file(table, temp_dir):
    path = save_embeddings(table, os.path.join(temp_dir, "e.bin"))
    data = Path(path).read_bytes()
    Path(path).write_bytes(data[:-5])
    with pytest.raises(StoreError, match="float32"):
        load_embeddings(path)
    Path(path).write_bytes(data[:2])
    with pytest.raises(StoreError, match="обрезан"):
        load_embeddings(path)


def test_header_dimension_mismatch(temp_dir):
    header = {"format": EMBEDDINGS_FORMAT, "version": FORMAT_VERSION, "modality": "image",
              "item_ids": ["a", "b"], "rows": 2, "d_m": 5, "dtype": "<f4", "provenance": {}}
    path = Path(temp_dir) / "bad.bin"
    path.write_bytes(_pack(header, np.zeros((2, 4), dtype="<f4").tobytes()))
    with pytest.raises(StoreError, match="2×5"):
        load_embeddings(path)


def test_version_mismatch(temp_dir):
    header = {"format": EMBEDDINGS_FORMAT, "version": FORMAT_VERSION + 1, "modality": "text",
              "item_ids": [], "rows": 0, "d_m": 4}
    path = Path(temp_dir) / "future.bin"
    path.write_bytes(_pack(header, b""))
    with pytest.raises(StoreError, match="версия"):
        load_embeddings(path)


def test_wrong_format_and_missing_file(temp_dir, table):
    path = Path(temp_dir) / "ckpt.bin"
    save_checkpoint(Checkpoint(kind="bpr", params={"w": np.ones(2)}), path)
    with pytest.raises(StoreError):
        load_embeddings(path)
    with pytest.raises(StoreError, match="не найден"):
        load_embeddings(Path(temp_dir) / "missing.bin")


def test_zero_b_adapters_give_raw_embeddings(small_dataset, small_encoder):
    fresh = AdapterSet.build(small_encoder, "moda", small_encoder.site_names, rank=4, n_experts=2, gate_dim=4)
    raw_t, raw_v = embed_catalog(small_dataset.catalog, small_encoder)
    ada_t, ada_v = embed_catalog(small_dataset.catalog, small_encoder, fresh)
    assert np.array_equal(raw_t.matrix, ada_t.matrix)
    assert np.array_equal(raw_v.matrix, ada_v.matrix)


def test_async_matches_serial(small_config, trained_adapters, small_encoder):
    """Разбиение на куски не зависит от числа потоков: результат бит-в-бит."""
    catalog, _ = generate(small_config.data.model_copy(update={"n_items": 150}))
    serial = embed_catalog(catalog, small_encoder, trained_adapters)
    parallel = asyncio.run(embed_catalog_async(catalog, small_encoder, trained_adapters, workers=3))
    for a, b in zip(serial, parallel):
        assert a.item_ids == b.item_ids == catalog.item_ids
        assert np.array_equal(a.matrix, b.matrix)


def test_embedded_rows_normalized(small_dataset, small_encoder, trained_adapters):
    text, image = embed_catalog(small_dataset.catalog, small_encoder, trained_adapters,
                                provenance={"adapt_hash": "x"})
    for t in (text, image):
        assert t.matrix.shape == (len(small_dataset.catalog), small_encoder.d_m)
        assert np.allclose(np.linalg.norm(t.matrix, axis=1), 1.0, atol=1e-6)
        assert t.provenance == {"adapt_hash": "x"}


# ====================== ЧЕКПОЙНТЫ ============================

def test_checkpoint_byte_idempotent(temp_dir):
    ckpt = Checkpoint(kind="bpr", params={"b": np.arange(3.0), "a": np.eye(2)},
                      meta={"users": ["u1"]}, config={"seed": 1})
    first = save_checkpoint(ckpt, os.path.join(temp_dir, "1.ckpt"))
    second = save_checkpoint(ckpt, os.path.join(temp_dir, "2.ckpt"))
    assert first == second
    assert Path(temp_dir, "1.ckpt").read_bytes() == Path(temp_dir, "2.ckpt").read_bytes()

    loaded, ckpt_id = load_checkpoint(os.path.join(temp_dir, "1.ckpt"))
    assert ckpt_id == first
    assert loaded.kind == "bpr" and loaded.meta == {"users": ["u1"]} and loaded.config == {"seed": 1}
    assert np.array_equal(loaded.params["a"], np.eye(2))


def test_truncated_checkpoint(temp_dir):
    path = Path(temp_dir) / "c.ckpt"
    save_checkpoint(Checkpoint(kind="seq", params={"w": np.ones((3, 3))}), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(StoreError):
        load_checkpoint(path)


def test_restore_adapters_round_trip(trained_adapters, small_encoder, small_dataset, temp_dir):
    ckpt = adapters_checkpoint(trained_adapters, small_encoder, {"seed": 7}, {"adapt_hash": "h"})
    save_checkpoint(ckpt, os.path.join(temp_dir, "adapters.ckpt"))
    loaded, _ = load_checkpoint(os.path.join(temp_dir, "adapters.ckpt"))
    restored = restore_adapters(loaded, small_encoder)

    assert restored.kind == "moda"
    assert list(restored.adapters) == ["layer0.q_proj", "layer1.k_proj"]
    original = trained_adapters.parameters()
    assert all(np.array_equal(restored.parameters()[k], original[k]) for k in original)
    features = small_dataset.catalog.features(Modality.IMAGE)
    assert np.array_equal(small_encoder.encode_batch(features, Modality.IMAGE, restored),
                          small_encoder.encode_batch(features, Modality.IMAGE, trained_adapters))


def test_restore_adapters_other_encoder(trained_adapters, small_encoder):
    ckpt = adapters_checkpoint(trained_adapters, small_encoder, {})
    other = FrozenEncoder(small_encoder.config.model_copy(update={"seed": 99}))
    with pytest.raises(ProvenanceError) as exc:
        restore_adapters(ckpt, other)
    assert exc.value.exit_code == 5


def test_restore_empty_adapter_set(small_encoder):
    ckpt = adapters_checkpoint(AdapterSet("none"), small_encoder, {})
    assert len(restore_adapters(ckpt, small_encoder)) == 0


def test_ensure_writable(temp_dir):
    path = Path(temp_dir) / "exists.txt"
    path.write_text("x")
    with pytest.raises(ArtifactExistsError):
        ensure_writable(path)
    assert ensure_writable(path, force=True) == path
    assert ensure_writable(Path(temp_dir) / "new.txt") == Path(temp_dir) / "new.txt"


def test_check_provenance():
    check_provenance("embeddings", {"adapt_hash": "abc"}, "adapt_hash", "abc")
    with pytest.raises(ProvenanceError, match="embeddings") as exc:
        check_provenance("embeddings", {"adapt_hash": "abc"}, "adapt_hash", "def")
    assert exc.value.expected == "def" and exc.value.found == "abc"
    with pytest.raises(ProvenanceError):
        check_provenance("embeddings", {}, "adapt_hash", "def")


def test_encoder_config_hash_is_stable():
    """Один и тот же конфиг энкодера даёт одинаковый хэш весов."""
    cfg = EncoderConfig(hidden_dim=8, n_tokens=2, input_dim=3, d_m=4, seed=5)
    assert FrozenEncoder(cfg).weights_hash() == FrozenEncoder(cfg).weights_hash()
