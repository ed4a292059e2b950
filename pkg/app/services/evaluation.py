"""Leave-one-out: разбиение, полное ранжирование, Hit@K/NDCG@K и хвостовой срез."""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core.exceptions import DataError
from app.models.domain import InteractionLog
from app.models.reports import MetricBlock, MetricsReport, RankingResult

log = logging.getLogger(__name__)

MIN_INTERACTIONS = 3

Scorer = Callable[[str, List[str]], np.ndarray]


class TailSpec(BaseModel):
    """Хвост: строго меньше threshold тренировочных взаимодействий."""
    threshold: int = Field(4, ge=1)


@dataclass
class LooSplit:
    train: Dict[str, List[str]] = field(default_factory=dict)
    valid: Dict[str, str] = field(default_factory=dict)
    test: Dict[str, str] = field(default_factory=dict)
    excluded: List[str] = field(default_factory=list)

    @property
    def users(self) -> List[str]:
        return list(self.test)

    def history(self, user: str, target: str = "test") -> List[str]:
        """Известный префикс пользователя перед целевым айтемом."""
        if target == "valid":
            return list(self.train[user])
        return [*self.train[user], self.valid[user]]

    def train_counts(self) -> Counter:
        return Counter(item for items in self.train.values() for item in items)


def split_loo(interactions: InteractionLog | Mapping[str, Sequence[str]]) -> LooSplit:
    """Последний айтем — test, предпоследний — valid, остальное — train; короче 3 — исключены."""
    sequences = interactions.sequences() if isinstance(interactions, InteractionLog) else interactions
    split = LooSplit()
    for user, items in sequences.items():
        items = list(items)
        if len(items) < MIN_INTERACTIONS:
            split.excluded.append(user)
            continue
        split.train[user] = items[:-2]
        split.valid[user] = items[-2]
        split.test[user] = items[-1]
    if split.excluded:
        log.info(f"Из разбиения исключено {len(split.excluded)} пользователей с < {MIN_INTERACTIONS} взаимодействиями")
    return split


def tail_items(train: LooSplit | Mapping[str, Sequence[str]], spec: TailSpec = TailSpec(),
               item_ids: Optional[Iterable[str]] = None) -> Set[str]:
    """
    Айтемы с числом тренировочных взаимодействий в [0, threshold).

    Айтемы без единого взаимодействия попадают в хвост, только если передан item_ids.
    """
    counts = train.train_counts() if isinstance(train, LooSplit) else Counter(
        item for items in train.values() for item in items
    )
    universe = set(item_ids) if item_ids is not None else set(counts)
    return {item for item in universe if counts.get(item, 0) < spec.threshold}


def rank_of(scores: np.ndarray, target: int, exclude: Iterable[int] = ()) -> int:
    """
    Ранг цели среди всех айтемов, кроме exclude. Айтемы с равным скором стоят перед целью.
    """
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    for j in exclude:
        if j != target:
            keep[j] = False
    keep[target] = False
    return 1 + int(np.sum(scores[keep] >= scores[target]))


def ndcg_at(rank: int, k: int) -> float:
    return 1.0 / float(np.log2(rank + 1)) if rank <= k else 0.0


def _mean_block(results: Sequence[RankingResult]) -> Optional[MetricBlock]:
    if not results:
        return None
    return MetricBlock(
        hit=float(np.mean([r.hit for r in results])),
        ndcg=float(np.mean([r.ndcg for r in results])),
    )


def evaluate(scorer: Scorer, split: LooSplit, item_ids: Sequence[str], k: int = 10,
             tail: TailSpec = TailSpec(),
             target: Literal["test", "valid"] = "test") -> Tuple[MetricsReport, List[RankingResult]]:
    """
    Полное ранжирование целевого айтема каждого пользователя.

    scorer(user, history) возвращает скоры в порядке item_ids. Из кандидатов
    убираются известные айтемы пользователя (train + valid для test), кроме
    самой цели. Tail — пользователи, чей целевой айтем в хвосте по train-счётчикам.
    """
    index = {item: i for i, item in enumerate(item_ids)}
    counts = split.train_counts()
    held_out = split.test if target == "test" else split.valid

    results: List[RankingResult] = []
    for user, target_item in held_out.items():
        history = split.history(user, target)
        if target_item not in index:
            raise DataError(f"Целевой айтем {target_item} пользователя {user} отсутствует в каталоге")
        scores = np.asarray(scorer(user, history), dtype=np.float64)
        if scores.shape != (len(item_ids),):
            raise DataError(f"Скорер вернул форму {scores.shape}, ожидалось ({len(item_ids)},)")
        exclude = [index[i] for i in history if i in index]
        rank = rank_of(scores, index[target_item], exclude)
        results.append(RankingResult(
            user=user, target=target_item, rank=rank, hit=int(rank <= k), ndcg=ndcg_at(rank, k),
            tail=counts.get(target_item, 0) < tail.threshold,
        ))

    tail_results = [r for r in results if r.tail]
    overall = _mean_block(results) or MetricBlock(hit=0.0, ndcg=0.0)
    report = MetricsReport(
        k=k, overall=overall, tail=_mean_block(tail_results),
        n_users=len(results), n_tail_users=len(tail_results), n_excluded_users=len(split.excluded),
    )
    if report.tail is None:
        log.warning("Хвостовых пользователей нет: метрики Tail не вычислены")
    log.info(
        f"Оценка ({target}): H@{k}={overall.hit:.4f} N@{k}={overall.ndcg:.4f} "
        f"на {report.n_users} пользователях, хвост {report.n_tail_users}"
    )
    return report, results


def model_scorer(model) -> Scorer:
    """Скорер для рекомендеров из recsys: BPR ранжирует по user_id, SASRec-lite по истории."""
    from app.services.recsys import score_all

    if model.kind == "bpr":
        return lambda user, history: score_all(model, user)
    return lambda user, history: score_all(model, history)
