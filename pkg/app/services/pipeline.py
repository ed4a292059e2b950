"""Сборка этапов в памяти: адаптация → эмбеддинги → рекомендер → оценка, и сравнительные прогоны."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import AppError, DataError
from app.models.config import RunConfig, adapt_hash, data_hash
from app.models.domain import InteractionLog, ItemCatalog
from app.models.reports import ComparisonReport, MetricsReport, RankingResult, TrainLog, VariantRow
from app.services.adapt import run_stage1
from app.services.backbone import FrozenEncoder
from app.services.evaluation import LooSplit, TailSpec, evaluate, model_scorer, split_loo
from app.services.moda import AdapterSet
from app.services.recsys import ContentFeatures, Recommender, train_recommender
from app.services.store import EmbeddingTable, embed_catalog

log = logging.getLogger(__name__)

RECALL_KS = (1, 10)


@dataclass
class Variant:
    """Конфигурация строки сравнения: правки секций adapt и rec поверх базового конфига."""
    name: str
    description: str
    adapt: Dict[str, object] = field(default_factory=dict)
    rec: Dict[str, object] = field(default_factory=dict)


ABLATION_VARIANTS = [
    Variant("full", "MoDA + CMSA"),
    Variant("wo_cmsa", "MoDA без обучения (нулевое обновление, сырые эмбеддинги)",
            adapt={"adapter": "moda", "steps": 0}),
    Variant("wo_moda", "LoRA + CMSA", adapt={"adapter": "lora", "loss": "cmsa"}),
    Variant("wo_both", "без адаптера (замороженный энкодер)", adapt={"adapter": "none"}),
    Variant("wo_soft_target", "MoDA + InfoNCE", adapt={"adapter": "moda", "loss": "infonce"}),
]

COMPARE_VARIANTS = [
    Variant("base", "только ID-эмбеддинги", adapt={"adapter": "none"}, rec={"fusion": "id_only"}),
    Variant("raw", "эмбеддинги замороженного энкодера", adapt={"adapter": "none"}, rec={"fusion": "concat_linear"}),
    Variant("sda", "MoDA + CMSA", adapt={"adapter": "moda", "loss": "cmsa"}, rec={"fusion": "concat_linear"}),
]

MODALITY_VARIANTS = [
    Variant("id_only", "только ID", rec={"fusion": "id_only"}),
    Variant("text_only", "ID + текст", rec={"fusion": "text_only"}),
    Variant("image_only", "ID + изображение", rec={"fusion": "image_only"}),
    Variant("concat_linear", "ID + текст + изображение", rec={"fusion": "concat_linear"}),
]

VARIANT_SETS = {"ablate": ABLATION_VARIANTS, "compare": COMPARE_VARIANTS, "modality": MODALITY_VARIANTS}


# ====================== ЭТАПЫ ============================

def cross_modal_recall(text: np.ndarray, image: np.ndarray, ks: Sequence[int] = RECALL_KS) -> Dict[str, float]:
    """Recall@k поиска text → image по всему каталогу; равные скоры считаются против цели."""
    text = np.asarray(text, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if len(text) == 0:
        return {f"recall@{k}": 0.0 for k in ks}
    sims = text @ image.T
    diag = np.diag(sims)
    ranks = np.sum(sims >= diag[:, None], axis=1)
    return {f"recall@{k}": float(np.mean(ranks <= k)) for k in ks}


def content_features(text: EmbeddingTable, image: EmbeddingTable) -> ContentFeatures:
    if text.item_ids != image.item_ids:
        raise DataError("Таблицы text и image индексированы разными айтемами")
    return ContentFeatures(list(text.item_ids), text.matrix, image.matrix)


def table_provenance(cfg: RunConfig, checkpoint: Optional[str] = None) -> Dict[str, object]:
    return {"data_hash": data_hash(cfg), "adapt_hash": adapt_hash(cfg), "seed": cfg.seed,
            "checkpoint_id": checkpoint}


@dataclass
class PipelineResult:
    adapters: AdapterSet
    train_log: TrainLog
    text: EmbeddingTable
    image: EmbeddingTable
    model: Recommender
    metrics: MetricsReport
    rankings: List[RankingResult]
    recall: Dict[str, Dict[str, float]]


def adapt_and_embed(catalog: ItemCatalog, cfg: RunConfig, encoder: FrozenEncoder
                    ) -> Tuple[AdapterSet, TrainLog, EmbeddingTable, EmbeddingTable, Dict[str, Dict[str, float]]]:
    """Этап 1 и предрасчёт эмбеддингов; recall до и после адаптации."""
    before = embed_catalog(catalog, encoder, None)
    adapters, train_log = run_stage1(catalog, cfg.adapt, encoder)
    text, image = embed_catalog(catalog, encoder, adapters, provenance=table_provenance(cfg))
    recall = {
        "before": cross_modal_recall(before[0].matrix, before[1].matrix),
        "after": cross_modal_recall(text.matrix, image.matrix),
    }
    log.info(f"Кросс-модальный recall@1: {recall['before']['recall@1']:.4f} → {recall['after']['recall@1']:.4f}")
    return adapters, train_log, text, image, recall


def recommend_and_evaluate(split: LooSplit, features: ContentFeatures, cfg: RunConfig,
                           target: str = "test") -> Tuple[Recommender, MetricsReport, List[RankingResult]]:
    model = train_recommender(split.train, features, cfg.rec)
    metrics, rankings = evaluate(
        model_scorer(model), split, features.item_ids, k=cfg.eval.k,
        tail=TailSpec(threshold=cfg.eval.tail_threshold), target=target,
    )
    return model, metrics, rankings


def run_pipeline(catalog: ItemCatalog, interactions: InteractionLog, cfg: RunConfig,
                 encoder: Optional[FrozenEncoder] = None, target: str = "test") -> PipelineResult:
    """Полный конвейер в памяти с теми же функциями, что и у подкоманд CLI."""
    interactions.check_items(catalog)
    encoder = encoder or FrozenEncoder(cfg.encoder)
    adapters, train_log, text, image, recall = adapt_and_embed(catalog, cfg, encoder)
    model, metrics, rankings = recommend_and_evaluate(
        split_loo(interactions), content_features(text, image), cfg, target,
    )
    return PipelineResult(adapters, train_log, text, image, model, metrics, rankings, recall)


# ====================== СРАВНЕНИЯ ============================

def relative_delta(metrics: MetricsReport, reference: MetricsReport, tail: bool = False) -> Optional[float]:
    """Среднее относительное изменение H@K и N@K к опорной строке, в процентах (минус — падение)."""
    row = metrics.tail if tail else metrics.overall
    ref = reference.tail if tail else reference.overall
    if row is None or ref is None or ref.hit == 0 or ref.ndcg == 0:
        return None
    return 100.0 * ((row.hit - ref.hit) / ref.hit + (row.ndcg - ref.ndcg) / ref.ndcg) / 2.0


def variant_config(cfg: RunConfig, variant: Variant) -> RunConfig:
    return cfg.model_copy(update={
        "adapt": cfg.adapt.model_copy(update=variant.adapt),
        "rec": cfg.rec.model_copy(update=variant.rec),
    })


def run_variants(kind: str, catalog: ItemCatalog, interactions: InteractionLog, cfg: RunConfig,
                 variants: Optional[Sequence[Variant]] = None,
                 encoder: Optional[FrozenEncoder] = None) -> Tuple[ComparisonReport, Optional[AppError]]:
    """
    Прогоняет варианты по порядку; Δ считается к первой строке. Первая ошибка
    останавливает прогон: уже посчитанные строки остаются в отчёте.
    """
    variants = list(variants if variants is not None else VARIANT_SETS[kind])
    interactions.check_items(catalog)
    encoder = encoder or FrozenEncoder(cfg.encoder)
    split = split_loo(interactions)
    report = ComparisonReport(kind=kind)
    embedded: Dict[str, ContentFeatures] = {}
    reference: Optional[MetricsReport] = None

    for variant in variants:
        vcfg = variant_config(cfg, variant)
        log.info(f"[{kind}] вариант {variant.name}: {variant.description}")
        try:
            key = adapt_hash(vcfg)
            if key not in embedded:
                _, _, text, image, _ = adapt_and_embed(catalog, vcfg, encoder)
                embedded[key] = content_features(text, image)
            _, metrics, _ = recommend_and_evaluate(split, embedded[key], vcfg)
        except AppError as e:
            log.error(f"[{kind}] вариант {variant.name} завершился ошибкой: {e}")
            report.failed[variant.name] = str(e)
            return report, e

        if reference is None:
            reference = metrics
        report.rows.append(VariantRow(
            name=variant.name, description=variant.description, metrics=metrics,
            delta_overall=relative_delta(metrics, reference),
            delta_tail=relative_delta(metrics, reference, tail=True),
        ))
    return report, None
