"""Второй этап: рекомендеры поверх предрасчитанных эмбеддингов.

VBPR-подобный BPR: score(u, i) = b_i + γ_u·γ_i + θ_u·f_i, f_i — слияние (e_t, e_v).
SASRec-lite: один блок каузального self-attention и FFN; слитый контент
добавляется к ID-эмбеддингу айтема на входе и в выходной таблице.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np

from app.core.exceptions import DataError, DivergenceError, ShapeError
from app.models.config import RecConfig
from app.models.domain import EmbeddingPair, InteractionLog
from app.services import numerics as nx
from app.services.adapt import AdamState, optimizer_step
from app.services.numerics import GradTape, Matrix, Tensor

log = logging.getLogger(__name__)

FusionMode = Literal["concat_linear", "text_only", "image_only", "id_only"]
TrainData = Union[InteractionLog, Mapping[str, Sequence[str]]]


@dataclass
class ContentFeatures:
    """Контентные признаки айтемов в порядке каталога: строки text и image."""
    item_ids: List[str]
    text: Matrix
    image: Matrix

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.float64)
        self.image = np.asarray(self.image, dtype=np.float64)
        n = len(self.item_ids)
        if self.text.shape != self.image.shape or self.text.ndim != 2 or self.text.shape[0] != n:
            raise ShapeError(
                f"Признаки text {self.text.shape} и image {self.image.shape} "
                f"не согласованы с {n} айтемами"
            )

    @classmethod
    def zeros(cls, item_ids: Sequence[str], d_m: int = 1) -> "ContentFeatures":
        n = len(item_ids)
        return cls(list(item_ids), np.zeros((n, d_m)), np.zeros((n, d_m)))

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def d_m(self) -> int:
        return self.text.shape[1]

    @property
    def index(self) -> Dict[str, int]:
        return {item_id: i for i, item_id in enumerate(self.item_ids)}

    def pair(self, i: int) -> EmbeddingPair:
        return EmbeddingPair(item_id=self.item_ids[i], text=self.text[i], image=self.image[i])


# ====================== СЛИЯНИЕ ============================

class FusionAdapter:
    """Проекция контента в пространство рекомендера: 2·d_m → d_r для concat, d_m → d_r иначе."""

    def __init__(self, mode: FusionMode = "concat_linear", d_m: int = 32, d_r: int = 64,
                 init_std: float = 0.02, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.mode, self.d_m, self.d_r = mode, d_m, d_r
        self.projection: Optional[Matrix] = None
        if mode != "id_only":
            self.projection = rng.normal(0.0, init_std, size=(self.in_dim, d_r))

    @property
    def in_dim(self) -> int:
        if self.mode == "concat_linear":
            return 2 * self.d_m
        return 0 if self.mode == "id_only" else self.d_m

    def content_input(self, text, image) -> Optional[Matrix]:
        """Вход проекции по режиму; None для id_only."""
        text = np.atleast_2d(np.asarray(text, dtype=np.float64))
        image = np.atleast_2d(np.asarray(image, dtype=np.float64))
        for name, m in (("text", text), ("image", image)):
            if m.shape[1] != self.d_m:
                raise ShapeError(f"fusion: ширина {name} {m.shape[1]}, ожидалось d_m={self.d_m}")
        if self.mode == "concat_linear":
            return np.hstack([text, image])
        if self.mode == "text_only":
            return text
        if self.mode == "image_only":
            return image
        return None

    def fuse(self, pair: EmbeddingPair) -> np.ndarray:
        content = self.content_input(pair.text, pair.image)
        if content is None:
            return np.zeros(self.d_r)
        return (content @ self.projection)[0]


def fuse(pair: EmbeddingPair, adapter: FusionAdapter) -> np.ndarray:
    """Слитый контентный вектор айтема (d_r); id_only — нулевой вектор."""
    return adapter.fuse(pair)


def _sequences(interactions: TrainData) -> Dict[str, List[str]]:
    if isinstance(interactions, InteractionLog):
        return interactions.sequences()
    return {user: list(items) for user, items in interactions.items()}


def _encode_items(index: Mapping[str, int], items: Sequence[str]) -> List[int]:
    try:
        return [index[i] for i in items]
    except KeyError as e:
        raise DataError(f"Айтем {e.args[0]} отсутствует в таблице эмбеддингов") from e


def _constants(params: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: nx.Tensor(v) for k, v in params.items()}


def _check_finite(value: float, step: int, model: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{model}: лосс стал нечисловым на шаге {step}: {value}", step=step)


# ====================== BPR ============================

class BprModel:
    """VBPR-подобная модель: ID-факторы, смещения айтемов и пользовательский вектор к контенту."""

    kind = "bpr"

    def __init__(self, user_ids: Sequence[str], features: ContentFeatures, config: RecConfig,
                 params: Optional[Dict[str, np.ndarray]] = None):
        self.user_ids = list(user_ids)
        self.user_index = {u: k for k, u in enumerate(self.user_ids)}
        self.features = features
        self.config = config
        rng = np.random.default_rng(config.seed or 0)
        self.fusion = FusionAdapter(config.fusion, features.d_m, config.d_r, config.init_std, rng)
        self.content = self.fusion.content_input(features.text, features.image)
        self.params = params if params is not None else self._init_params(rng)
        self.loss_history: List[float] = []

    def _init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        n_u, n_i, d, std = len(self.user_ids), len(self.features), self.config.d_r, self.config.init_std
        params = {
            "user_emb": rng.normal(0.0, std, size=(n_u, d)),
            "item_emb": rng.normal(0.0, std, size=(n_i, d)),
            "item_bias": np.zeros(n_i),
        }
        if self.fusion.projection is not None:
            params["user_content"] = rng.normal(0.0, std, size=(n_u, d))
            params["fusion.proj"] = self.fusion.projection
        return params

    def _scores_tensor(self, params: Mapping[str, Tensor], users: np.ndarray, items: np.ndarray) -> Tensor:
        x = nx.add(
            nx.take_rows(params["item_bias"], items),
            nx.dot(nx.take_rows(params["user_emb"], users), nx.take_rows(params["item_emb"], items)),
        )
        if "fusion.proj" in params:
            fused = nx.matmul(nx.Tensor(self.content[items]), params["fusion.proj"])
            x = nx.add(x, nx.dot(nx.take_rows(params["user_content"], users), fused))
        return x

    def loss_tensor(self, params: Mapping[str, Tensor], users, pos, neg) -> Tensor:
        """−mean log σ(x_ui − x_uj) (+ L2 по всем параметрам)."""
        users, pos, neg = (np.asarray(a, dtype=np.int64) for a in (users, pos, neg))
        diff = nx.sub(self._scores_tensor(params, users, pos), self._scores_tensor(params, users, neg))
        loss = nx.scale(nx.sum_(nx.log_sigmoid(diff)), -1.0 / len(users))
        if self.config.l2 > 0:
            for p in params.values():
                loss = nx.add(loss, nx.scale(nx.sum_(nx.mul(p, p)), self.config.l2))
        return loss

    def score_all(self, user: str) -> np.ndarray:
        if user not in self.user_index:
            raise DataError(f"Неизвестный пользователь: {user}")
        u, p = self.user_index[user], self.params
        scores = p["item_bias"] + p["item_emb"] @ p["user_emb"][u]
        if "fusion.proj" in p:
            scores = scores + (self.content @ p["fusion.proj"]) @ p["user_content"][u]
        return scores

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        self.params = params
        if "fusion.proj" in params:
            self.fusion.projection = params["fusion.proj"]

    def meta(self) -> dict:
        return {"kind": self.kind, "fusion": self.fusion.mode, "user_ids": self.user_ids,
                "item_ids": self.features.item_ids}


def _sample_negative(rng: np.random.Generator, n_items: int, seen: set) -> Optional[int]:
    """Равномерно по айтемам, которых пользователь не видел; None, если таких нет."""
    if len(seen) >= n_items:
        return None
    while True:
        j = int(rng.integers(n_items))
        if j not in seen:
            return j


def bpr_train(interactions: TrainData, features: ContentFeatures, config: RecConfig) -> BprModel:
    """Обучение BPR на тренировочной части: тройки (u, i⁺, i⁻), i⁻ равномерно из невиденных."""
    sequences = _sequences(interactions)
    index = features.index
    users = []
    for user, items in sequences.items():
        if not items:
            log.warning(f"Пользователь {user} без тренировочных айтемов пропущен")
            continue
        users.append(user)

    model = BprModel(users, features, config)
    seen = {model.user_index[u]: set(_encode_items(index, sequences[u])) for u in users}
    pairs = [(model.user_index[u], i) for u in users for i in _encode_items(index, sequences[u])]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed or 0, 1]))
    n_items = len(features)

    params, state, step = model.params, AdamState(), 0
    log.info(f"BPR: {len(users)} пользователей, {len(pairs)} пар, {config.epochs} эпох, fusion={config.fusion}")
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            triples = []
            for k in order[start:start + config.batch_size]:
                u, i = pairs[k]
                j = _sample_negative(rng, n_items, seen[u])
                if j is not None:
                    triples.append((u, i, j))
            if not triples:
                continue
            u, i, j = (np.array(col) for col in zip(*triples))
            tape = GradTape()
            loss = model.loss_tensor(tape.params(params), u, i, j)
            value = loss.item()
            _check_finite(value, step, "BPR")
            params, state = optimizer_step(params, tape.backward(loss), state, config.learning_rate)
            losses.append(value)
            step += 1
        if losses:
            model.loss_history.append(float(np.mean(losses)))
            log.debug(f"BPR эпоха {epoch}: loss={model.loss_history[-1]:.6f}")

    model.set_params(params)
    if model.loss_history:
        log.info(f"BPR обучен: {step} шагов, loss последней эпохи {model.loss_history[-1]:.6f}")
    return model


# ====================== SASRec-lite ============================

@dataclass
class SeqExample:
    """Одна последовательность батча, дополненная справа до общей длины L."""
    inputs: np.ndarray      # (L,) индексы айтемов, pad = n_items
    targets: np.ndarray     # (L,)
    negatives: np.ndarray   # (L, k)
    mask: np.ndarray        # (L,) 1 — реальная позиция, 0 — паддинг


def causal_mask(length: int) -> Matrix:
    return np.triu(np.full((length, length), nx.MASK_VALUE), k=1)


class SeqModel:
    """Одноблочный SASRec: позиционные эмбеддинги, каузальное внимание, FFN с residual."""

    kind = "seq"

    def __init__(self, features: ContentFeatures, config: RecConfig,
                 params: Optional[Dict[str, np.ndarray]] = None):
        self.features = features
        self.config = config
        self.n_items = len(features)
        self.pad = self.n_items
        rng = np.random.default_rng(config.seed or 0)
        self.fusion = FusionAdapter(config.fusion, features.d_m, config.d_r, config.init_std, rng)
        content = self.fusion.content_input(features.text, features.image)
        # строка паддинга без контента
        self.content = None if content is None else np.vstack([content, np.zeros((1, content.shape[1]))])
        self.params = params if params is not None else self._init_params(rng)
        self.loss_history: List[float] = []

    def _init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        d, std = self.config.d_r, self.config.init_std
        item_emb = rng.normal(0.0, std, size=(self.n_items + 1, d))
        item_emb[self.pad] = 0.0
        params = {
            "item_emb": item_emb,
            "pos_emb": rng.normal(0.0, std, size=(self.config.max_len, d)),
            "attn.q": rng.normal(0.0, std, size=(d, d)),
            "attn.k": rng.normal(0.0, std, size=(d, d)),
            "attn.v": rng.normal(0.0, std, size=(d, d)),
            "ffn.w1": rng.normal(0.0, std, size=(d, d)),
            "ffn.b1": np.zeros(d),
            "ffn.w2": rng.normal(0.0, std, size=(d, d)),
            "ffn.b2": np.zeros(d),
        }
        if self.fusion.projection is not None:
            params["fusion.proj"] = self.fusion.projection
        return params

    def item_table(self, params: Mapping[str, Tensor]) -> Tensor:
        """(n_items + 1) × d_r: ID-эмбеддинг плюс слитый контент."""
        table = nx.as_tensor(params["item_emb"])
        if self.content is not None:
            table = nx.add(table, nx.matmul(nx.Tensor(self.content), params["fusion.proj"]))
        return table

    def encode_tensor(self, params: Mapping[str, Tensor], table: Tensor, inputs) -> Tensor:
        """Скрытые состояния позиций (L × d_r); позиция p видит только 0..p."""
        inputs = np.asarray(inputs, dtype=np.int64)
        length = len(inputs)
        if length > self.config.max_len:
            raise ShapeError(f"pos_emb: длина {length} больше max_len={self.config.max_len}")
        d = self.config.d_r
        x = nx.add(nx.take_rows(table, inputs), nx.take_rows(params["pos_emb"], np.arange(length)))
        q = nx.matmul(x, params["attn.q"])
        k = nx.matmul(x, params["attn.k"])
        v = nx.matmul(x, params["attn.v"])
        logits = nx.add(nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(d)), causal_mask(length))
        h = nx.add(x, nx.matmul(nx.softmax(logits), v))
        ff = nx.relu(nx.add(nx.matmul(h, params["ffn.w1"]), params["ffn.b1"]))
        return nx.add(h, nx.add(nx.matmul(ff, params["ffn.w2"]), params["ffn.b2"]))

    def loss_tensor(self, params: Mapping[str, Tensor], examples: Sequence[SeqExample]) -> Tensor:
        """Кросс-энтропия «1 позитив против k негативов» по реальным позициям; паддинг вне лосса."""
        table = self.item_table(params)
        count = float(sum(ex.mask.sum() for ex in examples))
        total = None
        for ex in examples:
            h = self.encode_tensor(params, table, ex.inputs)
            length, k = ex.negatives.shape
            candidates = np.concatenate([ex.targets[:, None], ex.negatives], axis=1)
            rows = nx.take_rows(h, np.repeat(np.arange(length), k + 1))
            logits = nx.reshape(nx.dot(rows, nx.take_rows(table, candidates.ravel())), (length, k + 1))
            # негатив, совпавший с целью, выключается
            collide = np.zeros((length, k + 1))
            collide[:, 1:][ex.negatives == ex.targets[:, None]] = nx.MASK_VALUE
            log_p = nx.log_softmax(nx.add(logits, collide))
            part = nx.sum_(nx.mul(nx.pick(log_p, np.zeros(length, dtype=np.int64)), ex.mask))
            total = part if total is None else nx.add(total, part)
        if total is None or count == 0:
            raise ShapeError("SASRec-lite: в батче нет реальных позиций")
        loss = nx.scale(total, -1.0 / count)
        if self.config.l2 > 0:
            for p in params.values():
                loss = nx.add(loss, nx.scale(nx.sum_(nx.mul(p, p)), self.config.l2))
        return loss

    def _history(self, sequence: Sequence[str]) -> List[int]:
        idx = _encode_items(self.features.index, sequence)[-self.config.max_len:]
        if not idx:
            raise DataError("Пустая история: нечего ранжировать")
        return idx

    def position_logits(self, sequence: Sequence[str]) -> Matrix:
        """Логиты следующего айтема по всем айтемам для каждой позиции (L × n_items)."""
        params = _constants(self.params)
        table = self.item_table(params)
        h = self.encode_tensor(params, table, self._history(sequence)).data
        return h @ table.data[:self.n_items].T

    def score_all(self, sequence: Sequence[str]) -> np.ndarray:
        return self.position_logits(sequence)[-1]

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        self.params = params
        if "fusion.proj" in params:
            self.fusion.projection = params["fusion.proj"]

    def meta(self) -> dict:
        return {"kind": self.kind, "fusion": self.fusion.mode, "item_ids": self.features.item_ids}


def make_seq_example(sequence: Sequence[int], length: int, n_items: int, n_negatives: int,
                     rng: np.random.Generator) -> SeqExample:
    """Вход s[:-1], цели s[1:], дополнение справа до length; негативы равномерно по айтемам."""
    seq = np.asarray(sequence, dtype=np.int64)
    m = len(seq) - 1
    inputs = np.full(length, n_items, dtype=np.int64)
    targets = np.full(length, n_items, dtype=np.int64)
    mask = np.zeros(length)
    inputs[:m], targets[:m], mask[:m] = seq[:-1], seq[1:], 1.0
    negatives = rng.integers(n_items, size=(length, n_negatives))
    return SeqExample(inputs=inputs, targets=targets, negatives=negatives, mask=mask)


def seq_train(interactions: TrainData, features: ContentFeatures, config: RecConfig) -> SeqModel:
    """Обучение SASRec-lite предсказанию следующего айтема; последовательности короче 2 пропускаются."""
    sequences = _sequences(interactions)
    index = features.index
    model = SeqModel(features, config)

    encoded, skipped = [], 0
    for user, items in sequences.items():
        if len(items) < 2:
            skipped += 1
            continue
        encoded.append(_encode_items(index, items)[-(config.max_len + 1):])
    if skipped:
        log.warning(f"SASRec-lite: пропущено {skipped} последовательностей короче 2")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed or 0, 1]))
    params, state, step = model.params, AdamState(), 0
    log.info(
        f"SASRec-lite: {len(encoded)} последовательностей, {config.epochs} эпох, "
        f"fusion={config.fusion}, {config.n_negatives} негативов"
    )
    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded))
        losses = []
        for start in range(0, len(order), config.seq_batch_size):
            chunk = [encoded[k] for k in order[start:start + config.seq_batch_size]]
            length = max(len(s) - 1 for s in chunk)
            examples = [
                make_seq_example(s, length, model.n_items, config.n_negatives, rng) for s in chunk
            ]
            tape = GradTape()
            loss = model.loss_tensor(tape.params(params), examples)
            value = loss.item()
            _check_finite(value, step, "SASRec-lite")
            params, state = optimizer_step(params, tape.backward(loss), state, config.learning_rate)
            losses.append(value)
            step += 1
        if losses:
            model.loss_history.append(float(np.mean(losses)))
            log.debug(f"SASRec-lite эпоха {epoch}: loss={model.loss_history[-1]:.6f}")

    model.set_params(params)
    if model.loss_history:
        log.info(f"SASRec-lite обучен: {step} шагов, loss последней эпохи {model.loss_history[-1]:.6f}")
    return model


# ====================== ОБЩЕЕ ============================

Recommender = Union[BprModel, SeqModel]


def train_recommender(interactions: TrainData, features: ContentFeatures, config: RecConfig) -> Recommender:
    if config.model == "bpr":
        return bpr_train(interactions, features, config)
    return seq_train(interactions, features, config)


def restore_model(kind: str, params: Dict[str, np.ndarray], meta: dict,
                  features: ContentFeatures, config: RecConfig) -> Recommender:
    """Модель из чекпойнта; порядок айтемов признаков обязан совпадать с сохранённым."""
    if list(meta.get("item_ids", [])) != features.item_ids:
        raise DataError("Порядок айтемов чекпойнта не совпадает с таблицей эмбеддингов")
    if kind == "bpr":
        model: Recommender = BprModel(meta["user_ids"], features, config, params=dict(params))
    elif kind == "seq":
        model = SeqModel(features, config, params=dict(params))
    else:
        raise DataError(f"Неизвестный тип рекомендера в чекпойнте: {kind}")
    model.set_params(dict(params))
    return model


def score_all(model: Recommender, query) -> np.ndarray:
    """Скоры всех айтемов: query — user_id для BPR или история айтемов для SASRec-lite."""
    scores = model.score_all(query)
    if not np.all(np.isfinite(scores)):
        raise DivergenceError(f"{model.kind}: нечисловые скоры", step=-1)
    return scores
