"""Замороженный двухбашенный энкодер: заменитель предобученной VLM на масштабе стола.

Каждая башня: входная проекция → L блоков из четырёх линейных слоёв
(`layer{k}.q_proj|k_proj|v_proj|o_proj`) с tanh между ними → mean pooling по
токенам → проекция в d_m → (опционально) L2-нормализация. Веса башен
независимы и фиксируются сидом; адаптеры подключаются по имени слоя и общие
для обеих башен, как общий слой у одной VLM.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from app.core.exceptions import ShapeError, SiteNotFoundError
from app.models.config import EncoderConfig
from app.models.domain import Modality
from app.services import numerics as nx
from app.services.numerics import Matrix, Tensor

log = logging.getLogger(__name__)

SITE_KINDS = ("q_proj", "k_proj", "v_proj", "o_proj")


@dataclass(frozen=True)
class AdapterSite:
    """Точка вставки адаптера: целевая матрица W_0 (d_in × d_out) в каждой башне."""
    name: str
    d_in: int
    d_out: int
    weights: Mapping[Modality, Matrix] = field(repr=False)

    def weight(self, modality: Modality) -> Matrix:
        return self.weights[Modality(modality)]


def _frozen(rng: np.random.Generator, d_in: int, d_out: int) -> Matrix:
    w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
    w.setflags(write=False)
    return w


class FrozenEncoder:
    def __init__(self, config: Optional[EncoderConfig] = None):
        self.config = config or EncoderConfig()
        cfg = self.config
        seed = cfg.seed if cfg.seed is not None else 0

        self._embed: Dict[Modality, Matrix] = {}
        self._proj: Dict[Modality, Matrix] = {}
        site_weights: Dict[str, Dict[Modality, Matrix]] = {}
        for tower, modality in enumerate(Modality):
            rng = np.random.default_rng(np.random.SeedSequence([seed, tower]))
            self._embed[modality] = _frozen(rng, cfg.input_dim, cfg.hidden_dim)
            for name in self.site_names:
                site_weights.setdefault(name, {})[modality] = _frozen(rng, cfg.hidden_dim, cfg.hidden_dim)
            self._proj[modality] = _frozen(rng, cfg.hidden_dim, cfg.d_m)

        self._sites: List[AdapterSite] = [
            AdapterSite(name=name, d_in=cfg.hidden_dim, d_out=cfg.hidden_dim, weights=site_weights[name])
            for name in self.site_names
        ]
        log.debug(f"Энкодер собран: {len(self._sites)} точек вставки, хэш {self.weights_hash()}")

    @property
    def site_names(self) -> List[str]:
        return [f"layer{k}.{kind}" for k in range(self.config.n_layers) for kind in SITE_KINDS]

    @property
    def d_m(self) -> int:
        return self.config.d_m

    def list_sites(self) -> List[AdapterSite]:
        """Точки вставки в порядке прохода по башне."""
        return list(self._sites)

    def site(self, name: str) -> AdapterSite:
        for s in self._sites:
            if s.name == name:
                return s
        raise SiteNotFoundError(f"Нет слоя {name}; доступны: {', '.join(self.site_names)}")

    def resolve_sites(self, targets: List[str]) -> List[str]:
        """Имена слоёв по списку целей: полное имя или тип (`q_proj` — во всех блоках)."""
        resolved = []
        for target in targets:
            if target in SITE_KINDS:
                resolved.extend(n for n in self.site_names if n.endswith("." + target))
            else:
                resolved.append(self.site(target).name)
        return [n for n in self.site_names if n in set(resolved)]

    def last_layer_sites(self, kinds=("q_proj", "k_proj")) -> List[str]:
        last = self.config.n_layers - 1
        return [f"layer{last}.{kind}" for kind in kinds]

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for modality in Modality:
            h.update(self._embed[modality].tobytes())
            for s in self._sites:
                h.update(s.weight(modality).tobytes())
            h.update(self._proj[modality].tobytes())
        return h.hexdigest()

    # ---------------------------------------------------------------

    def _check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features = features[None]
        cfg = self.config
        if features.ndim != 3 or features.shape[1:] != (cfg.n_tokens, cfg.input_dim):
            raise ShapeError(
                f"embed: ожидались признаки (*, {cfg.n_tokens}, {cfg.input_dim}), "
                f"получено {features.shape}"
            )
        return features

    def forward(self, features: np.ndarray, modality: Modality, bound=None) -> Tensor:
        """
        Батч признаков (N × n_tokens × input_dim) → Tensor эмбеддингов (N × d_m).

        bound — адаптеры, привязанные к ленте или к константам (moda.AdapterSet.bind);
        слои без адаптера считаются чистым x·W_0.
        """
        modality = Modality(modality)
        features = self._check_features(features)
        n, tokens, _ = features.shape
        h = nx.tanh(nx.matmul(nx.Tensor(features.reshape(n * tokens, -1)), nx.Tensor(self._embed[modality])))
        for s in self._sites:
            if h.shape[1] != s.d_in:
                raise ShapeError(f"{s.name}: вход ширины {h.shape[1]}, ожидалось {s.d_in}")
            if bound is not None and s.name in bound:
                h = bound[s.name].forward(s, h, modality)
            else:
                h = nx.matmul(h, nx.Tensor(s.weight(modality)))
            h = nx.tanh(h)
        pooled = nx.mean_pool(h, tokens)
        e = nx.matmul(pooled, nx.Tensor(self._proj[modality]))
        if self.config.normalize_embeddings:
            e = nx.l2_normalize(e)
        return e

    def encode(self, item_features: np.ndarray, modality: Modality, adapters=None) -> np.ndarray:
        """Эмбеддинг одного айтема (d_m); adapters — moda.AdapterSet или None."""
        return self.encode_batch(np.asarray(item_features)[None], modality, adapters)[0]

    def encode_batch(self, features: np.ndarray, modality: Modality, adapters=None) -> np.ndarray:
        bound = adapters.bind(None) if adapters is not None else None
        return self.forward(features, modality, bound).data
