"""Подкоманды CLI: каждая читает артефакты предыдущего этапа, сверяет provenance и пишет свои."""

import argparse
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from app.core.config import config
from app.models.config import RunConfig, adapt_hash, data_hash, rec_hash
from app.models.domain import InteractionLog, ItemCatalog
from app.models.reports import ComparisonReport
from app.services.backbone import FrozenEncoder
from app.services.dataset_io import load_catalog, load_interactions, save_catalog, save_interactions
from app.services.diagnose import conflict_report
from app.services.evaluation import TailSpec, evaluate, model_scorer, split_loo
from app.services.pipeline import adapt_and_embed, content_features, cross_modal_recall, run_variants, table_provenance
from app.services.recsys import restore_model, train_recommender
from app.services.report_saver import ReportSaver
from app.services.store import (
    Checkpoint,
    adapters_checkpoint,
    atomic_write_text,
    check_provenance,
    embed_catalog_async,
    ensure_writable,
    load_checkpoint,
    load_embeddings,
    restore_adapters,
    save_checkpoint,
    save_embeddings,
)
from app.services.synthetic import generate_with_truth, oracle_cross_modal_accuracy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    """Раскладка директории запуска."""
    root: Path

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def catalog(self) -> Path:
        return self.data_dir / "catalog.jsonl"

    @property
    def interactions(self) -> Path:
        return self.data_dir / "interactions.csv"

    @property
    def data_meta(self) -> Path:
        return self.data_dir / "meta.json"

    @property
    def artifacts(self) -> Path:
        return self.root / "artifacts"

    @property
    def adapters(self) -> Path:
        return self.artifacts / "adapters.ckpt"

    @property
    def text_table(self) -> Path:
        return self.artifacts / "embeddings.text.bin"

    @property
    def image_table(self) -> Path:
        return self.artifacts / "embeddings.image.bin"

    @property
    def recommender(self) -> Path:
        return self.artifacts / "recommender.ckpt"


def load_context(args: argparse.Namespace) -> Tuple[RunConfig, RunPaths, ReportSaver]:
    cfg = RunConfig.load(args.config, seed=args.seed, out_dir=args.out, overrides=args.set)
    root = Path(cfg.out_dir or config.DATA_DIR)
    log.info(f"Запуск {args.command}: seed={cfg.seed}, out={root}")
    return cfg, RunPaths(root), ReportSaver(root, run_config=cfg, force=args.force)


def _claim(force: bool, *paths: Path) -> None:
    for path in paths:
        ensure_writable(path, force)


def _read_data(cfg: RunConfig, paths: RunPaths) -> Tuple[ItemCatalog, InteractionLog]:
    if paths.data_meta.exists():
        meta = json.loads(paths.data_meta.read_text(encoding="utf-8"))
        check_provenance("data", meta, "data_hash", data_hash(cfg))
    else:
        log.warning(f"{paths.data_meta} не найден: данные считаются внешними, provenance не сверяется")
    catalog = load_catalog(paths.catalog)
    interactions = load_interactions(paths.interactions, catalog=catalog)
    return catalog, interactions


def _load_tables(cfg: RunConfig, paths: RunPaths):
    text, image = load_embeddings(paths.text_table), load_embeddings(paths.image_table)
    for name, table in (("embeddings.text", text), ("embeddings.image", image)):
        check_provenance(name, table.provenance, "adapt_hash", adapt_hash(cfg))
    return text, image


# ====================== ЭТАПЫ ============================

async def cmd_generate(args: argparse.Namespace) -> int:
    cfg, paths, saver = load_context(args)
    _claim(args.force, paths.catalog, paths.interactions, paths.data_meta)

    dataset = generate_with_truth(cfg.data)
    save_catalog(dataset.catalog, paths.catalog)
    save_interactions(dataset.interactions, paths.interactions)

    meta = {
        "data_hash": data_hash(cfg),
        "seed": cfg.seed,
        "n_items": len(dataset.catalog),
        "n_interactions": len(dataset.interactions),
        "tail_exponent": dataset.truth.tail_exponent,
        "tail_fraction": dataset.truth.tail_fraction,
        "oracle_cross_modal_accuracy": oracle_cross_modal_accuracy(dataset),
        "config": cfg.data.model_dump(mode="json"),
    }
    atomic_write_text(paths.data_meta, json.dumps(meta, ensure_ascii=False, indent=2, sort_keys=True) + "\n")
    await saver.save_json("generate", meta)
    return 0


async def cmd_adapt(args: argparse.Namespace) -> int:
    cfg, paths, saver = load_context(args)
    _claim(args.force, paths.adapters)
    catalog, _ = _read_data(cfg, paths)

    encoder = FrozenEncoder(cfg.encoder)
    adapters, train_log, _, _, recall = adapt_and_embed(catalog, cfg, encoder)
    provenance = {"data_hash": data_hash(cfg), "adapt_hash": adapt_hash(cfg), "seed": cfg.seed}
    ckpt_id = save_checkpoint(
        adapters_checkpoint(adapters, encoder, cfg.model_dump(mode="json"), provenance), paths.adapters,
    )

    report = {
        "adapter": cfg.adapt.adapter,
        "loss": cfg.adapt.loss,
        "steps": len(train_log.records),
        "initial_loss": train_log.initial_loss,
        "final_loss": train_log.final_loss,
        "param_count": {
            "sites": {site: adapters[site].param_count().model_dump() for site in adapters.adapters},
            "total": adapters.param_count().model_dump(),
        },
        "cross_modal_recall": recall,
        "checkpoint_id": ckpt_id,
        "provenance": provenance,
    }
    steps = [
        {"step": r.step, "loss": r.loss, "wall_time": r.wall_time,
         **{f"grad_norm_{k}": v for k, v in r.grad_norms.items()}}
        for r in train_log.records
    ]
    await saver.save_all("adapt", report, {"adapt_steps": steps} if steps else None)
    return 0


async def cmd_embed(args: argparse.Namespace) -> int:
    cfg, paths, saver = load_context(args)
    _claim(args.force, paths.text_table, paths.image_table)
    ckpt, ckpt_id = load_checkpoint(paths.adapters)
    check_provenance("adapters", ckpt.meta.get("provenance") or {}, "adapt_hash", adapt_hash(cfg))
    catalog, _ = _read_data(cfg, paths)

    encoder = FrozenEncoder(cfg.encoder)
    adapters = restore_adapters(ckpt, encoder)
    text, image = await embed_catalog_async(
        catalog, encoder, adapters, provenance=table_provenance(cfg, ckpt_id), workers=config.WORKERS,
    )
    save_embeddings(text, paths.text_table)
    save_embeddings(image, paths.image_table)

    await saver.save_json("embed", {
        "rows": len(text.item_ids),
        "d_m": text.d_m,
        "normalized": cfg.encoder.normalize_embeddings,
        "cross_modal_recall": cross_modal_recall(text.matrix, image.matrix),
        "provenance": text.provenance,
    })
    return 0


async def cmd_train_rec(args: argparse.Namespace) -> int:
    cfg, paths, saver = load_context(args)
    _claim(args.force, paths.recommender)
    text, image = _load_tables(cfg, paths)
    _, interactions = _read_data(cfg, paths)

    split = split_loo(interactions)
    model = train_recommender(split.train, content_features(text, image), cfg.rec)
    provenance = {
        "adapt_hash": adapt_hash(cfg), "rec_hash": rec_hash(cfg), "seed": cfg.seed,
        "adapters_checkpoint": text.provenance.get("checkpoint_id"),
    }
    ckpt_id = save_checkpoint(
        Checkpoint(kind=model.kind, params=model.params, meta={**model.meta(), "provenance": provenance},
                   config=cfg.model_dump(mode="json")),
        paths.recommender,
    )
    await saver.save_json("train_rec", {
        "model": cfg.rec.model,
        "fusion": cfg.rec.fusion,
        "epochs": cfg.rec.epochs,
        "loss_history": model.loss_history,
        "n_train_users": len(split.train),
        "n_excluded_users": len(split.excluded),
        "checkpoint_id": ckpt_id,
        "provenance": provenance,
    })
    return 0


async def cmd_eval(args: argparse.Namespace) -> int:
    cfg, paths, saver = load_context(args)
    name = "eval" if args.target == "test" else f"eval_{args.target}"
    _claim(args.force, saver.json_dir / f"{name}.json")

    ckpt, ckpt_id = load_checkpoint(paths.recommender)
    check_provenance("recommender", ckpt.meta.get("provenance") or {}, "rec_hash", rec_hash(cfg))
    text, image = _load_tables(cfg, paths)
    _, interactions = _read_data(cfg, paths)

    features = content_features(text, image)
    model = restore_model(ckpt.kind, ckpt.params, ckpt.meta, features, cfg.rec)
    metrics, rankings = evaluate(
        model_scorer(model), split_loo(interactions), features.item_ids, k=cfg.eval.k,
        tail=TailSpec(threshold=cfg.eval.tail_threshold), target=args.target,
    )
    tables = {f"{name}_users": [r.model_dump() for r in rankings]} if cfg.eval.per_user_csv else None
    await saver.save_all(name, metrics, tables, extra={
        "provenance": {"rec_hash": rec_hash(cfg), "recommender_checkpoint": ckpt_id},
    })
    print(metrics.model_dump_json(indent=2) if args.json else metrics.table())
    return 0


async def cmd_diagnose(args: argparse.Namespace) -> int:
    cfg, paths, saver = load_context(args)
    _claim(args.force, saver.json_dir / "diagnose.json")
    catalog, _ = _read_data(cfg, paths)

    report = conflict_report(catalog, FrozenEncoder(cfg.encoder), cfg.diagnose, cfg.adapt)
    tables = {"diagnose_cosines": [e.model_dump() for e in report.entries]} if cfg.diagnose.csv else None
    await saver.save_all("diagnose", report, tables)
    for kind, per_site in report.median.items():
        cells = ", ".join(f"{site}={'—' if v is None else f'{v:.4f}'}" for site, v in per_site.items())
        print(f"{kind}: {cells}")
    return 0


# ====================== СРАВНЕНИЯ ============================

def comparison_rows(report: ComparisonReport) -> List[dict]:
    rows = []
    for row in report.rows:
        m = row.metrics
        rows.append({
            "name": row.name,
            "description": row.description,
            "overall_hit": m.overall.hit,
            "overall_ndcg": m.overall.ndcg,
            "tail_hit": m.tail.hit if m.tail else None,
            "tail_ndcg": m.tail.ndcg if m.tail else None,
            "delta_overall": row.delta_overall,
            "delta_tail": row.delta_tail,
        })
    return rows


def comparison_table(report: ComparisonReport, k: int) -> str:
    def cell(v: Optional[float], pct: bool = False) -> str:
        if v is None:
            return f"{'—':>9}"
        return f"{v:>8.2f}%" if pct else f"{v:>9.4f}"

    lines = [f"{'':16}{'H@' + str(k):>9}{'N@' + str(k):>9}{'Tail H':>9}{'Tail N':>9}{'Δ':>9}{'Δ tail':>9}"]
    for r in comparison_rows(report):
        lines.append(
            f"{r['name']:16}{cell(r['overall_hit'])}{cell(r['overall_ndcg'])}{cell(r['tail_hit'])}"
            f"{cell(r['tail_ndcg'])}{cell(r['delta_overall'], True)}{cell(r['delta_tail'], True)}"
        )
    for name, error in report.failed.items():
        lines.append(f"{name:16} ОШИБКА: {error}")
    return "\n".join(lines)


async def _run_comparison(kind: str, args: argparse.Namespace) -> int:
    cfg, paths, saver = load_context(args)
    _claim(args.force, saver.json_dir / f"{kind}.json")
    catalog, interactions = _read_data(cfg, paths)

    report, error = run_variants(kind, catalog, interactions, cfg)
    await saver.save_all(kind, report, {kind: comparison_rows(report)})
    print(comparison_table(report, cfg.eval.k))
    if error is not None:
        raise error
    return 0


async def cmd_ablate(args: argparse.Namespace) -> int:
    return await _run_comparison("ablate", args)


async def cmd_compare(args: argparse.Namespace) -> int:
    return await _run_comparison("compare", args)


async def cmd_modality(args: argparse.Namespace) -> int:
    return await _run_comparison("modality", args)
