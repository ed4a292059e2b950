"""Тесты замороженного двухбашенного энкодера."""
import numpy as np
import pytest

from app.core.exceptions import ShapeError, SiteNotFoundError
from app.models.config import AdaptConfig, EncoderConfig
from app.models.domain import Modality
from app.services.adapt import build_adapters, run_stage1
from app.services.backbone import FrozenEncoder
from app.services.moda import AdapterSet


@pytest.fixture
def encoder():
    return FrozenEncoder(EncoderConfig(n_layers=2, hidden_dim=16, n_tokens=4, input_dim=6, d_m=8, seed=3))


@pytest.fixture
def features():
    return np.random.default_rng(0).normal(size=(5, 4, 6))


def test_encode_is_deterministic(encoder, features):
    """Тот же айтем, тот же сид, без адаптеров — одинаковые векторы."""
    a = encoder.encode(features[0], Modality.TEXT)
    b = FrozenEncoder(encoder.config).encode(features[0], Modality.TEXT)
    assert np.array_equal(a, b)


def test_embeddings_unit_norm(encoder, features):
    for modality in Modality:
        e = encoder.encode_batch(features, modality)
        assert e.shape == (5, 8)
        assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9)


def test_normalization_can_be_disabled(features):
    enc = FrozenEncoder(EncoderConfig(hidden_dim=16, n_tokens=4, input_dim=6, d_m=8,
                                      normalize_embeddings=False, seed=3))
    norms = np.linalg.norm(enc.encode_batch(features, Modality.IMAGE), axis=1)
    assert not np.allclose(norms, 1.0)


def test_towers_have_independent_weights(encoder, features):
    """Одинаковый вход в разные башни даёт разные эмбеддинги."""
    t = encoder.encode_batch(features, Modality.TEXT)
    v = encoder.encode_batch(features, Modality.IMAGE)
    assert not np.allclose(t, v)


def test_site_listing(encoder):
    """L=2 → 8 слоёв с именами layer0.q_proj … layer1.o_proj."""
    names = [s.name for s in encoder.list_sites()]
    assert len(names) == 8
    assert names[0] == "layer0.q_proj" and names[-1] == "layer1.o_proj"
    assert len(set(names)) == len(names)
    assert encoder.site("layer1.k_proj").name == "layer1.k_proj"


def test_site_not_found(encoder):
    with pytest.raises(SiteNotFoundError, match="layer9.q_proj"):
        encoder.site("layer9.q_proj")


def test_resolve_sites(encoder):
    assert encoder.resolve_sites(["q_proj"]) == ["layer0.q_proj", "layer1.q_proj"]
    assert encoder.resolve_sites(["k_proj", "layer0.q_proj"]) == ["layer0.q_proj", "layer0.k_proj", "layer1.k_proj"]
    assert encoder.last_layer_sites() == ["layer1.q_proj", "layer1.k_proj"]


def test_shape_error_names_layer(encoder):
    with pytest.raises(ShapeError, match="embed"):
        encoder.encode_batch(np.zeros((2, 4, 5)), Modality.TEXT)


def test_frozen_weights_are_read_only(encoder):
    with pytest.raises(ValueError):
        encoder.site("layer0.q_proj").weight(Modality.TEXT)[0, 0] = 1.0


@pytest.mark.parametrize("kind", ["moda", "lora"])
def test_zero_b_adapters_leave_output_unchanged(encoder, features, kind):
    """Свежие адаптеры (все B = 0) не меняют эмбеддинги."""
    adapters = AdapterSet.build(encoder, kind, encoder.site_names, rank=4, n_experts=2, gate_dim=4, seed=1)
    for modality in Modality:
        assert np.array_equal(
            encoder.encode_batch(features, modality, adapters),
            encoder.encode_batch(features, modality),
        )


def test_detach_restores_output(encoder, features):
    """Подключили обученные адаптеры, отключили — выход бит-в-бит прежний."""
    before = encoder.encode_batch(features, Modality.TEXT)
    adapters = AdapterSet.build(encoder, "moda", ["layer0.q_proj"], rank=4, n_experts=2, gate_dim=4)
    rng = np.random.default_rng(0)
    adapters.load_parameters({k: rng.normal(size=v.shape) for k, v in adapters.parameters().items()})
    assert not np.allclose(encoder.encode_batch(features, Modality.TEXT, adapters), before)
    assert np.array_equal(encoder.encode_batch(features, Modality.TEXT), before)


def test_hash_unchanged_by_training(encoder, small_dataset):
    """Хэш весов энкодера одинаков до и после этапа 1."""
    enc = FrozenEncoder(EncoderConfig(n_layers=2, hidden_dim=16, n_tokens=4, input_dim=6, d_m=8, seed=3))
    before = enc.weights_hash()
    run_stage1(small_dataset.catalog, AdaptConfig(batch_size=8, steps=3, rank=4, n_experts=2, gate_dim=4, seed=0), enc)
    assert enc.weights_hash() == before


def test_build_adapters_targets(encoder):
    adapters = build_adapters(encoder, AdaptConfig(rank=4, n_experts=2, gate_dim=4))
    assert list(adapters.adapters) == ["layer0.q_proj", "layer0.k_proj", "layer1.q_proj", "layer1.k_proj"]
    assert len(build_adapters(encoder, AdaptConfig(adapter="none"))) == 0
