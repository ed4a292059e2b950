"""Тесты MoDA и LoRA адаптеров."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.exceptions import ShapeError, UnknownModalityError
from app.models.domain import Modality
from app.services import numerics as nx
from app.services.backbone import AdapterSite
from app.services.moda import AdapterSet, LoraAdapter, ModaAdapter, parameter_group


def _site(d_in, d_out, seed=0):
    rng = np.random.default_rng(seed)
    return AdapterSite(name="layer0.q_proj", d_in=d_in, d_out=d_out, weights={
        Modality.TEXT: rng.normal(size=(d_in, d_out)),
        Modality.IMAGE: rng.normal(size=(d_in, d_out)),
    })


def _randomize(adapter, seed=0):
    rng = np.random.default_rng(seed)
    adapter.load_parameters({k: rng.normal(size=v.shape) for k, v in adapter.parameters().items()})
    return adapter


# ====================== ГЕЙТ ============================

def test_zero_gate_is_uniform():
    adapter = ModaAdapter(6, 5, rank=4, n_experts=4, gate_dim=3)
    assert np.allclose(adapter.gate_weights(Modality.TEXT), [0.25] * 4, atol=1e-15)


def test_single_expert_gate():
    adapter = _randomize(ModaAdapter(6, 5, rank=4, n_experts=1, gate_dim=3))
    assert np.array_equal(adapter.gate_weights(Modality.IMAGE), [1.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gate_on_simplex(seed):
    """ω^m лежит на симплексе."""
    adapter = _randomize(ModaAdapter(6, 5, rank=8, n_experts=4, gate_dim=8), seed)
    for modality in Modality:
        w = adapter.gate_weights(modality)
        assert np.all(w >= 0) and np.all(w <= 1)
        assert abs(w.sum() - 1.0) < 1e-12


def test_unknown_modality_lists_registered():
    adapter = ModaAdapter(6, 5, rank=4, n_experts=2, gate_dim=3)
    with pytest.raises(UnknownModalityError, match="text, image"):
        adapter.gate_weights("audio")
    only_text = ModaAdapter(6, 5, rank=4, n_experts=2, gate_dim=3, modalities=[Modality.TEXT])
    with pytest.raises(UnknownModalityError):
        only_text.gate_weights(Modality.IMAGE)


def test_rank_must_divide():
    with pytest.raises(ShapeError):
        ModaAdapter(6, 5, rank=5, n_experts=2)


# ====================== FORWARD ============================

def test_zero_b_forward_is_base():
    site = _site(4, 3)
    adapter = ModaAdapter(4, 3, rank=4, n_experts=2, gate_dim=3)
    x = np.random.default_rng(1).normal(size=(2, 4))
    assert np.array_equal(adapter.forward(site, x, Modality.TEXT), x @ site.weight(Modality.TEXT))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_single_expert_equals_lora(seed):
    """N_e = 1: MoDA совпадает с LoRA бит-в-бит."""
    rng = np.random.default_rng(seed)
    site = _site(5, 4, seed)
    moda = _randomize(ModaAdapter(5, 4, rank=3, n_experts=1, gate_dim=2), seed)
    lora = LoraAdapter(5, 4, rank=3)
    lora.load_parameters({"B": moda.experts[0][0], "A": moda.experts[0][1]})
    x = rng.normal(size=(3, 5))
    for modality in Modality:
        assert np.array_equal(moda.forward(site, x, modality), lora.forward(site, x, modality))


def test_two_experts_hand_computation():
    """ω = (0.25, 0.75): h = x·W0 + 0.25·x·B1·A1 + 0.75·x·B2·A2."""
    w0 = np.array([[1.0, 2.0], [0.0, -1.0]])
    site = AdapterSite(name="s", d_in=2, d_out=2, weights={Modality.TEXT: w0, Modality.IMAGE: w0})
    adapter = ModaAdapter(2, 2, rank=2, n_experts=2, gate_dim=2, gate_activation="identity")
    b1, a1 = np.array([[1.0], [2.0]]), np.array([[0.5, -1.0]])
    b2, a2 = np.array([[0.0], [1.0]]), np.array([[2.0, 1.0]])
    params = adapter.parameters()
    params.update({"experts.0.B": b1, "experts.0.A": a1, "experts.1.B": b2, "experts.1.A": a2,
                   "gate.weight": np.zeros((2, 2)), "gate.bias": np.array([0.25, 0.75])})
    adapter.load_parameters(params)

    x = np.array([3.0, -1.0])
    expected = x @ w0 + 0.25 * (x @ b1 @ a1) + 0.75 * (x @ b2 @ a2)
    assert np.allclose(adapter.gate_weights(Modality.TEXT), [0.25, 0.75])
    assert np.allclose(adapter.forward(site, x, Modality.TEXT), expected, atol=1e-12)


def test_forward_shape_error():
    adapter = ModaAdapter(4, 3, rank=4, n_experts=2, gate_dim=3)
    with pytest.raises(ShapeError, match="layer0.q_proj"):
        adapter.forward(_site(4, 3), np.ones(5), Modality.TEXT)


def test_modality_routing_is_disentangled():
    """Изменение Emb_text не меняет выход для картинок."""
    site = _site(4, 3)
    adapter = _randomize(ModaAdapter(4, 3, rank=4, n_experts=2, gate_dim=3))
    x = np.random.default_rng(2).normal(size=(3, 4))
    image_before = adapter.forward(site, x, Modality.IMAGE)
    text_before = adapter.forward(site, x, Modality.TEXT)
    adapter.modality_embeddings[Modality.TEXT] = adapter.modality_embeddings[Modality.TEXT] + 5.0
    assert np.array_equal(adapter.forward(site, x, Modality.IMAGE), image_before)
    assert not np.allclose(adapter.forward(site, x, Modality.TEXT), text_before)


# ====================== ΔW И ПАРАМЕТРЫ ============================

def test_delta_weight_rank_and_consistency():
    site = _site(8, 6)
    adapter = _randomize(ModaAdapter(8, 6, rank=4, n_experts=2, gate_dim=3))
    for modality in Modality:
        delta = adapter.delta_weight(modality)
        s = np.linalg.svd(delta, compute_uv=False)
        assert int(np.sum(s > 1e-9)) <= 4
        x = np.random.default_rng(5).normal(size=(3, 8))
        diff = adapter.forward(site, x, modality) - x @ site.weight(modality)
        assert np.allclose(diff, x @ delta, atol=1e-10)


def test_single_expert_delta():
    adapter = _randomize(ModaAdapter(5, 4, rank=2, n_experts=1, gate_dim=2))
    b, a = adapter.experts[0]
    assert np.allclose(adapter.delta_weight(Modality.TEXT), b @ a, atol=1e-15)


def test_param_count():
    """64×64, r = 8: экспертов 1024 у MoDA (N_e = 4) и у LoRA; гейт N_e·d_g + N_e + 2·d_g."""
    moda = ModaAdapter(64, 64, rank=8, n_experts=4, gate_dim=8)
    lora = LoraAdapter(64, 64, rank=8)
    assert moda.param_count().expert_params == 1024
    assert lora.param_count().expert_params == 1024
    assert moda.param_count().gate_params == 4 * 8 + 4 + 2 * 8
    assert lora.param_count().gate_params == 0


def test_gradient_through_forward():
    """Градиенты головы с квадратичной ошибкой по B_i, A_i, гейту и Emb_m."""
    site = _site(4, 3)
    adapter = _randomize(ModaAdapter(4, 3, rank=4, n_experts=2, gate_dim=3), seed=7)
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))

    def f(tape, p):
        h = adapter.forward_tensor(p, site, nx.Tensor(x), Modality.TEXT)
        err = nx.sub(h, y)
        return nx.mean(nx.mul(err, err))

    report = nx.grad_check(f, adapter.parameters())
    assert report.passed, report


def test_adapter_set_round_trip():
    from app.models.config import EncoderConfig
    from app.services.backbone import FrozenEncoder

    encoder = FrozenEncoder(EncoderConfig(hidden_dim=8, n_tokens=2, input_dim=3, d_m=4))
    adapters = AdapterSet.build(encoder, "moda", ["layer0.q_proj", "layer1.k_proj"], rank=4, n_experts=2, gate_dim=3)
    values = {k: np.full(v.shape, 0.5) for k, v in adapters.parameters().items()}
    adapters.load_parameters(values)
    assert all(np.array_equal(adapters.parameters()[k], values[k]) for k in values)
    assert "layer0.q_proj.experts.0.B" in values
    assert adapters.param_count().expert_params == 2 * (8 * 4 + 4 * 8)


def test_parameter_group():
    assert parameter_group("layer0.q_proj.experts.1.B") == "B"
    assert parameter_group("layer0.q_proj.A") == "A"
    assert parameter_group("layer0.q_proj.gate.bias") == "gate"
    assert parameter_group("layer1.k_proj.emb.text") == "emb"
