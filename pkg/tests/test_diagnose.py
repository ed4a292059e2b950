"""Тесты диагностики конфликта градиентов модальностей."""
import numpy as np
import pytest

from app.core.exceptions import SiteNotFoundError
from app.models.config import AdaptConfig
from app.models.domain import Modality
from app.services import numerics as nx
from app.services.cmsa import AlignmentBatch
from app.services.diagnose import (
    conflict_report,
    cosine,
    decomposition_residual,
    default_loss,
    modality_isolated_gradients,
    site_gradient,
)
from app.services.moda import AdapterSet, BoundAdapter

SITE = "layer1.q_proj"


@pytest.fixture
def adapters(small_encoder):
    adapters = AdapterSet.build(small_encoder, "moda", small_encoder.last_layer_sites(),
                                rank=4, n_experts=2, gate_dim=4, seed=0)
    rng = np.random.default_rng(11)
    adapters.load_parameters({k: 0.1 * rng.normal(size=v.shape) for k, v in adapters.parameters().items()})
    return adapters


@pytest.fixture
def probe():
    return np.arange(8)


def test_cosine_cases():
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert cosine(g, 2.0 * g) == pytest.approx(1.0)
    assert cosine(g, -g) == pytest.approx(-1.0)
    assert cosine(g, np.zeros_like(g)) is None
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)


def test_cosine_scale_invariant():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert cosine(7.5 * a, b) == pytest.approx(cosine(a, b), abs=1e-12)


def test_both_branches_blocked_gives_zero(small_encoder, small_dataset, adapters, probe):
    g = site_gradient(small_encoder, small_dataset.catalog, probe, adapters, SITE,
                      blocked=(Modality.TEXT, Modality.IMAGE))
    assert np.array_equal(g, np.zeros_like(g))


def test_text_only_loss_gives_zero_image_gradient(small_encoder, small_dataset, adapters, probe):
    """Лосс зависит только от текстовой башни: g_image — точный ноль."""
    g_text, g_image = modality_isolated_gradients(
        small_encoder, small_dataset.catalog, probe, adapters, SITE, loss_fn=lambda batch: nx.sum_(batch.text),
    )
    assert np.array_equal(g_image, np.zeros_like(g_image))
    assert np.linalg.norm(g_text) > 0


def test_isolated_gradients_sum_to_full(small_encoder, small_dataset, adapters, probe):
    """g_text + g_image равен полному градиенту по B (цепное правило)."""
    catalog = small_dataset.catalog
    g_text, g_image = modality_isolated_gradients(small_encoder, catalog, probe, adapters, SITE)
    full = site_gradient(small_encoder, catalog, probe, adapters, SITE)
    assert np.allclose(g_text + g_image, full, atol=1e-10)


def test_text_gradient_matches_finite_differences(small_encoder, small_dataset, adapters, probe):
    """Центральные разности по B первого эксперта, визуальная ветвь с исходным B."""
    catalog = small_dataset.catalog
    loss_fn = default_loss(AdaptConfig(teacher_temp_mode="divide", detach_teacher=False))
    key = adapters[SITE].first_b()
    g_text = site_gradient(small_encoder, catalog, probe, adapters, SITE, (Modality.IMAGE,), loss_fn)

    def loss_with(b):
        bound_text = adapters.bind(None)
        params = dict(bound_text[SITE].params)
        params[key] = nx.Tensor(b)
        bound_text[SITE] = BoundAdapter(adapters[SITE], params)
        text = small_encoder.forward(catalog.features(Modality.TEXT)[probe], Modality.TEXT, bound_text)
        image = small_encoder.forward(catalog.features(Modality.IMAGE)[probe], Modality.IMAGE, adapters.bind(None))
        return loss_fn(AlignmentBatch(text, image, tau=0.07)).item()

    b0 = adapters.parameters()[f"{SITE}.{key}"]
    eps = 1e-6
    rng = np.random.default_rng(3)
    for flat in rng.choice(b0.size, size=6, replace=False):
        idx = np.unravel_index(flat, b0.shape)
        plus, minus = b0.copy(), b0.copy()
        plus[idx] += eps
        minus[idx] -= eps
        fd = (loss_with(plus) - loss_with(minus)) / (2 * eps)
        assert g_text[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_site_without_adapter(small_encoder, small_dataset, adapters, probe):
    with pytest.raises(SiteNotFoundError, match="layer0.q_proj"):
        site_gradient(small_encoder, small_dataset.catalog, probe, adapters, "layer0.q_proj")


def test_conflict_report_shape_and_determinism(small_encoder, small_dataset, small_config):
    cfg = small_config.diagnose
    first = conflict_report(small_dataset.catalog, small_encoder, cfg, small_config.adapt)
    second = conflict_report(small_dataset.catalog, small_encoder, cfg, small_config.adapt)

    sites = small_encoder.last_layer_sites()
    assert len(first.entries) == len(cfg.adapters) * cfg.n_seeds * len(sites)
    assert set(first.median) == set(cfg.adapters)
    assert all(set(per_site) == set(sites) for per_site in first.median.values())
    for entry in first.entries:
        assert entry.cosine is None or -1.0 <= entry.cosine <= 1.0
        assert 0.0 <= entry.decomposition_residual <= 1e-8
    assert first.model_dump() == second.model_dump()


def test_decomposition_residual():
    g_text, g_image = np.array([[1.0, 2.0]]), np.array([[0.5, -1.0]])
    assert decomposition_residual(g_text, g_image, g_text + g_image) == 0.0
    assert decomposition_residual(g_text, g_image, np.array([[1.5, 4.0]])) == pytest.approx(3.0)
