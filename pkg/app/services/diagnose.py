"""Конфликт градиентов модальностей на матрицах B адаптеров (LoRA против MoDA)."""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import SiteNotFoundError
from app.models.config import AdaptConfig, DiagnoseConfig
from app.models.domain import ItemCatalog, Modality
from app.models.reports import ConflictEntry, ConflictReport
from app.services import numerics as nx
from app.services.adapt import encode_alignment_batch, make_batches, run_stage1
from app.services.backbone import FrozenEncoder
from app.services.cmsa import AlignmentBatch, alignment_loss
from app.services.moda import AdapterSet
from app.services.numerics import Tensor

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
RESIDUAL_TOLERANCE = 1e-8

LossFn = Callable[[AlignmentBatch], Tensor]


def default_loss(config: Optional[AdaptConfig] = None) -> LossFn:
    config = config or AdaptConfig()
    return lambda batch: alignment_loss(
        batch, config.loss, mode=config.teacher_temp_mode, detach_teacher=config.detach_teacher,
    )


def site_gradient(encoder: FrozenEncoder, catalog: ItemCatalog, index: np.ndarray, adapters: AdapterSet,
                  site: str, blocked: Tuple[Modality, ...] = (), loss_fn: Optional[LossFn] = None,
                  tau: float = 0.07) -> np.ndarray:
    """
    Градиент лосса по B слоя site (у MoDA — B первого эксперта).
    Ветви из blocked кодируются константами.
    """
    if site not in adapters:
        raise SiteNotFoundError(f"На слое {site} нет адаптера; есть: {', '.join(adapters.adapters) or '—'}")
    loss_fn = loss_fn or default_loss()
    tape = nx.GradTape()
    bound = adapters.bind(tape)
    batch = encode_alignment_batch(encoder, catalog, index, bound, tau=tau, blocked=blocked)
    grads = tape.backward(loss_fn(batch))
    return grads[f"{site}.{adapters[site].first_b()}"]


def modality_isolated_gradients(encoder: FrozenEncoder, catalog: ItemCatalog, index: np.ndarray,
                                adapters: AdapterSet, site: str, loss_fn: Optional[LossFn] = None,
                                tau: float = 0.07) -> Tuple[np.ndarray, np.ndarray]:
    """(g_text, g_image): в g_text визуальная ветвь заблокирована, в g_image — текстовая."""
    g_text = site_gradient(encoder, catalog, index, adapters, site, (Modality.IMAGE,), loss_fn, tau)
    g_image = site_gradient(encoder, catalog, index, adapters, site, (Modality.TEXT,), loss_fn, tau)
    return g_text, g_image


def cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Косинус развёрнутых матриц; None при норме ниже 1e-12."""
    a, b = np.ravel(a), np.ravel(b)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def decomposition_residual(g_text: np.ndarray, g_image: np.ndarray, g_full: np.ndarray) -> float:
    """Норма g_text + g_image − g_full."""
    return float(np.linalg.norm(np.asarray(g_text) + np.asarray(g_image) - np.asarray(g_full)))


def _median(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.median(present)) if present else None


def conflict_report(catalog: ItemCatalog, encoder: FrozenEncoder, config: DiagnoseConfig,
                    adapt_config: Optional[AdaptConfig] = None,
                    sites: Optional[Sequence[str]] = None) -> ConflictReport:
    """
    Для каждого типа адаптера и сида: этап 1 на adapt_steps шагов, затем замер косинуса
    модально-изолированных градиентов на фиксированном пробном батче. Невязка
    g_text + g_image − g_full пишется в отчёт, а не предполагается нулевой.
    """
    adapt_config = adapt_config or AdaptConfig()
    sites = list(sites or config.sites or encoder.last_layer_sites())
    base_seed = config.seed or 0
    probe_size = min(config.probe_batch_size, len(catalog))
    report = ConflictReport(batch={"probe_batch_size": probe_size, "n_seeds": config.n_seeds,
                                   "adapt_steps": config.adapt_steps})
    loss_fn = default_loss(adapt_config)

    for kind in config.adapters:
        for s in range(config.n_seeds):
            seed = base_seed + s
            stage_cfg = adapt_config.model_copy(update={
                "adapter": kind, "steps": config.adapt_steps, "seed": seed, "target_sites": sites,
            })
            adapters, _ = run_stage1(catalog, stage_cfg, encoder)
            probe = next(make_batches(catalog, probe_size, seed=seed))
            for site in sites:
                g_text, g_image = modality_isolated_gradients(
                    encoder, catalog, probe, adapters, site, loss_fn, tau=adapt_config.tau,
                )
                g_full = site_gradient(encoder, catalog, probe, adapters, site, (), loss_fn, tau=adapt_config.tau)
                entry = ConflictEntry(
                    adapter=kind, site=site, seed=seed, cosine=cosine(g_text, g_image),
                    text_norm=float(np.linalg.norm(g_text)), image_norm=float(np.linalg.norm(g_image)),
                    decomposition_residual=decomposition_residual(g_text, g_image, g_full),
                )
                if entry.cosine is None:
                    log.warning(f"{kind}/{site}/seed={seed}: вырожденная норма градиента, косинус не определён")
                if entry.decomposition_residual > RESIDUAL_TOLERANCE:
                    log.warning(
                        f"{kind}/{site}/seed={seed}: g_text + g_image отличается от полного градиента "
                        f"на {entry.decomposition_residual:.3e}"
                    )
                report.entries.append(entry)

        per_site: Dict[str, Optional[float]] = {}
        for site in sites:
            per_site[site] = _median([e.cosine for e in report.entries if e.adapter == kind and e.site == site])
        report.median[kind] = per_site
        log.info(f"Медианные косинусы {kind}: " + ", ".join(
            f"{site}={v:.4f}" if v is not None else f"{site}=—" for site, v in per_site.items()
        ))
    return report
