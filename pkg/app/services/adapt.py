"""Первый этап: обучение только параметров адаптера под лосс выравнивания по каталогу айтемов."""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from app.core.exceptions import DivergenceError, FrozenWeightsError, NumericsError
from app.models.config import AdaptConfig
from app.models.domain import ItemCatalog, Modality
from app.models.reports import StepRecord, TrainLog
from app.services import numerics as nx
from app.services.backbone import FrozenEncoder
from app.services.cmsa import AlignmentBatch, alignment_loss
from app.services.moda import AdapterSet, BoundAdapter, parameter_group

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ====================== БАТЧИ ============================

def make_batches(catalog: ItemCatalog | int, batch_size: int, seed: int,
                 epochs: Optional[int] = None) -> Iterator[np.ndarray]:
    """
    Индексы айтемов батчами по batch_size с перемешиванием каждой эпохи.

    Неполный хвост эпохи отбрасывается при любом остатке. epochs=None — бесконечный поток.
    AlignmentBatch из индексов строит encode_alignment_batch с адаптерами текущего шага.
    """
    n = catalog if isinstance(catalog, int) else len(catalog)
    if batch_size > n:
        raise NumericsError(f"batch_size={batch_size} больше размера каталога {n}")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        epoch += 1


def encode_alignment_batch(encoder: FrozenEncoder, catalog: ItemCatalog, index: np.ndarray,
                           bound=None, tau: float = 0.07,
                           blocked: Tuple[Modality, ...] = ()) -> AlignmentBatch:
    """
    Кодирует батч обеими башнями. Модальности из blocked кодируются с адаптерами-константами:
    градиент через них не течёт.
    """
    towers = {}
    for modality in Modality:
        features = catalog.features(modality)[index]
        use = bound
        if bound is not None and modality in blocked:
            use = {name: _as_constant(b) for name, b in bound.items()}
        towers[modality] = encoder.forward(features, modality, use)
    return AlignmentBatch(
        text=towers[Modality.TEXT], image=towers[Modality.IMAGE], tau=tau,
        item_ids=[catalog.item_ids[i] for i in index],
    )


def _as_constant(bound: BoundAdapter) -> BoundAdapter:
    return BoundAdapter(bound.adapter, {k: nx.detach(v) for k, v in bound.params.items()})


# ====================== ОПТИМИЗАТОР ============================

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                   state: AdamState, lr: float) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Шаг Adam (β = 0.9, 0.999; ε = 1e-8; без weight decay). Возвращает новые параметры и состояние."""
    b1, b2 = ADAM_BETAS
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def grad_norms(grads: Mapping[str, np.ndarray], group=parameter_group) -> Dict[str, float]:
    """L2-нормы по группам параметров плюс общая `total`."""
    sq: Dict[str, float] = {}
    for name, g in grads.items():
        key = group(name)
        sq[key] = sq.get(key, 0.0) + float(np.sum(g * g))
    norms = {k: float(np.sqrt(v)) for k, v in sorted(sq.items())}
    norms["total"] = global_norm(grads)
    return norms


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: Optional[float]) -> Dict[str, np.ndarray]:
    if max_norm is None:
        return dict(grads)
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


# ====================== ОБУЧЕНИЕ ============================

def build_adapters(encoder: FrozenEncoder, config: AdaptConfig) -> AdapterSet:
    if config.adapter == "none":
        return AdapterSet("none")
    sites = encoder.resolve_sites(config.target_sites)
    return AdapterSet.build(
        encoder, config.adapter, sites, rank=config.rank, n_experts=config.n_experts,
        gate_dim=config.gate_dim, gate_activation=config.gate_activation, seed=config.seed or 0,
    )


def run_stage1(catalog: ItemCatalog, config: AdaptConfig,
               encoder: FrozenEncoder) -> Tuple[AdapterSet, TrainLog]:
    """
    Обучает только адаптеры под L_CL; энкодер заморожен.

    adapter=none — пустой набор (сырые эмбеддинги энкодера), лосс игнорируется.
    steps=0 — адаптеры в начальном состоянии (нулевое обновление).
    """
    if len(catalog) == 0:
        raise NumericsError("Пустой каталог: нечего адаптировать")

    adapters = build_adapters(encoder, config)
    train_log = TrainLog()
    if config.adapter == "none" or config.steps == 0:
        log.info(f"Этап 1 пропущен: adapter={config.adapter}, steps={config.steps}")
        return adapters, train_log

    frozen_hash = encoder.weights_hash()
    batch_size = min(config.batch_size, len(catalog))
    batches = make_batches(catalog, batch_size, seed=config.seed or 0)
    params = {k: v.copy() for k, v in adapters.parameters().items()}
    state = AdamState()
    started = time.perf_counter()

    log.info(
        f"Этап 1: {config.adapter}+{config.loss}, {len(adapters)} слоёв, "
        f"{config.steps} шагов, батч {batch_size}, τ={config.tau}"
    )
    for step in range(config.steps):
        index = next(batches)
        tape = nx.GradTape()
        bound = adapters.bind(tape)
        batch = encode_alignment_batch(encoder, catalog, index, bound, tau=config.tau)
        loss = alignment_loss(batch, config.loss, mode=config.teacher_temp_mode,
                              detach_teacher=config.detach_teacher)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"Лосс стал нечисловым на шаге {step}: {value}", step=step)

        grads = tape.backward(loss)
        norms = grad_norms(grads)
        grads = clip_by_global_norm(grads, config.grad_clip)
        params, state = optimizer_step(params, grads, state, config.learning_rate)
        adapters.load_parameters(params)

        train_log.records.append(StepRecord(
            step=step, loss=value, grad_norms=norms, wall_time=time.perf_counter() - started,
        ))
        if step % config.log_every == 0 or step == config.steps - 1:
            log.info(f"шаг {step}: loss={value:.6f} |g|={norms['total']:.4f}")

    if encoder.weights_hash() != frozen_hash:
        raise FrozenWeightsError("Веса замороженного энкодера изменились во время адаптации")
    log.info(f"Этап 1 завершён: loss {train_log.initial_loss:.6f} → {train_log.final_loss:.6f}")
    return adapters, train_log
