"""Синтетический датасет: кластеры в латентном пространстве, рассогласование модальностей поворотом,
длинный хвост популярности по Ципфу и пользователи с любимыми кластерами.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from app.models.config import SynthConfig
from app.models.domain import Interaction, InteractionLog, ItemCatalog
from app.services.evaluation import TailSpec, split_loo, tail_items

log = logging.getLogger(__name__)

MAX_TAIL_ATTEMPTS = 20
TAIL_EXPONENT_STEP = 0.25


@dataclass
class GroundTruth:
    """Скрытая структура генерации: для оракулов и отчётов, на диск не пишется."""
    latent: np.ndarray          # (n_items, latent_dim)
    text_map: np.ndarray        # (n_tokens, latent_dim, feature_dim)
    image_map: np.ndarray
    rotation: np.ndarray        # (latent_dim, latent_dim)
    tail_exponent: float
    tail_fraction: float


@dataclass
class SyntheticDataset:
    catalog: ItemCatalog
    interactions: InteractionLog
    truth: GroundTruth


def rotation_matrix(dim: int, angle: float) -> np.ndarray:
    """Поворот на angle в каждой плоскости (0,1), (2,3), ...; нечётная последняя ось неподвижна."""
    r = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for a in range(0, dim - 1, 2):
        r[a, a], r[a, a + 1] = c, s
        r[a + 1, a], r[a + 1, a + 1] = -s, c
    return r


def _f32(x: np.ndarray) -> np.ndarray:
    # признаки хранятся в f32; генерация сразу отдаёт представимые значения
    return x.astype(np.float32).astype(np.float64)


def _features(latent: np.ndarray, maps: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    tokens = np.einsum("nl,tlf->ntf", latent, maps)
    if noise > 0:
        tokens = tokens + rng.normal(0.0, noise, size=tokens.shape)
    return _f32(tokens)


def _generate_items(config: SynthConfig, rng: np.random.Generator) -> Tuple[ItemCatalog, GroundTruth]:
    cfg = config
    centers = rng.normal(0.0, 1.0, size=(cfg.n_clusters, cfg.latent_dim))
    clusters = rng.integers(cfg.n_clusters, size=cfg.n_items)
    latent = centers[clusters] + rng.normal(0.0, cfg.cluster_spread, size=(cfg.n_items, cfg.latent_dim))

    scale = 1.0 / np.sqrt(cfg.latent_dim)
    text_map = rng.normal(0.0, scale, size=(cfg.n_tokens, cfg.latent_dim, cfg.feature_dim))
    image_map = rng.normal(0.0, scale, size=(cfg.n_tokens, cfg.latent_dim, cfg.feature_dim))
    rotation = rotation_matrix(cfg.latent_dim, cfg.misalignment_rotation_angle)

    width = len(str(cfg.n_items - 1))
    catalog = ItemCatalog(
        item_ids=[f"i{k:0{width}d}" for k in range(cfg.n_items)],
        text_features=_features(latent, text_map, cfg.noise_scale, rng),
        image_features=_features(latent @ rotation, image_map, cfg.noise_scale, rng),
        latent_cluster=[int(c) for c in clusters],
    )
    truth = GroundTruth(latent=latent, text_map=text_map, image_map=image_map, rotation=rotation,
                        tail_exponent=cfg.tail_exponent, tail_fraction=0.0)
    return catalog, truth


def _generate_interactions(config: SynthConfig, catalog: ItemCatalog, exponent: float,
                           rng: np.random.Generator) -> InteractionLog:
    cfg = config
    ranks = rng.permutation(cfg.n_items) + 1
    popularity = 1.0 / ranks.astype(np.float64) ** exponent
    clusters = np.asarray(catalog.latent_cluster)
    members = [np.flatnonzero(clusters == c) for c in range(cfg.n_clusters)]
    populated = np.array([len(m) > 0 for m in members], dtype=np.float64)

    records: List[Interaction] = []
    width = len(str(cfg.n_users - 1))
    for u in range(cfg.n_users):
        affinity = rng.dirichlet(np.full(cfg.n_clusters, 0.3)) * populated
        affinity = affinity / affinity.sum()
        length = int(rng.integers(cfg.min_sequence_length, cfg.max_sequence_length + 1))
        seen: set = set()
        cluster = int(rng.choice(cfg.n_clusters, p=affinity))
        for t in range(length):
            if t > 0 and rng.random() >= cfg.stay_probability:
                cluster = int(rng.choice(cfg.n_clusters, p=affinity))
            pool = [i for i in members[cluster] if i not in seen]
            if not pool:
                pool = [i for i in range(cfg.n_items) if i not in seen] or list(range(cfg.n_items))
            weights = popularity[pool] / popularity[pool].sum()
            item = int(rng.choice(pool, p=weights))
            seen.add(item)
            cluster = int(clusters[item])
            records.append(Interaction(user_id=f"u{u:0{width}d}", item_id=catalog.item_ids[item],
                                       timestamp=t))
    return InteractionLog(records=records)


def tail_fraction(catalog: ItemCatalog, interactions: InteractionLog, spec: TailSpec = TailSpec()) -> float:
    """Доля айтемов каталога с числом тренировочных взаимодействий < threshold."""
    if len(catalog) == 0:
        return 0.0
    return len(tail_items(split_loo(interactions), spec, catalog.item_ids)) / len(catalog)


def generate_with_truth(config: SynthConfig) -> SyntheticDataset:
    """
    Генерация с подбором показателя Ципфа: пока доля хвоста ниже target_tail_fraction,
    показатель растёт шагом 0.25 (не более 20 попыток).
    """
    seed = config.seed or 0
    catalog, truth = _generate_items(config, np.random.default_rng(np.random.SeedSequence([seed, 0])))

    exponent = config.tail_exponent
    for attempt in range(MAX_TAIL_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, attempt]))
        interactions = _generate_interactions(config, catalog, exponent, rng)
        fraction = tail_fraction(catalog, interactions)
        if config.target_tail_fraction is None or fraction >= config.target_tail_fraction:
            break
        log.debug(f"Доля хвоста {fraction:.3f} при показателе {exponent:.2f}, увеличиваю")
        exponent += TAIL_EXPONENT_STEP
    else:
        log.warning(f"Доля хвоста {fraction:.3f} не достигла {config.target_tail_fraction} за {MAX_TAIL_ATTEMPTS} попыток")

    truth.tail_exponent, truth.tail_fraction = exponent, fraction
    log.info(
        f"Сгенерировано {len(catalog)} айтемов, {len(interactions)} взаимодействий; "
        f"показатель Ципфа {exponent:.2f}, хвост {fraction:.1%}"
    )
    return SyntheticDataset(catalog=catalog, interactions=interactions, truth=truth)


def generate(config: SynthConfig) -> Tuple[ItemCatalog, InteractionLog]:
    dataset = generate_with_truth(config)
    return dataset.catalog, dataset.interactions


def recover_latent(features: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Обращение линейной карты токенов псевдообратной матрицей: (n, T, F) → (n, latent_dim)."""
    flat_maps = np.concatenate(list(maps), axis=1)              # latent_dim × T·F
    flat = features.reshape(features.shape[0], -1)
    return flat @ np.linalg.pinv(flat_maps)


def nearest_neighbor_accuracy(queries: np.ndarray, keys: np.ndarray) -> float:
    """Доля запросов, чей ближайший по косинусу ключ — та же строка."""
    q = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    k = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), 1e-12)
    sims = q @ k.T
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(len(q))))


def oracle_cross_modal_accuracy(dataset: SyntheticDataset) -> float:
    """Кросс-модальный поиск text → image в восстановленных латентах, до любой адаптации."""
    t = recover_latent(dataset.catalog.text_features, dataset.truth.text_map)
    v = recover_latent(dataset.catalog.image_features, dataset.truth.image_map)
    return nearest_neighbor_accuracy(t, v)
