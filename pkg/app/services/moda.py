"""MoDA: низкоранговое обновление, разложенное на эксперты и смешиваемое гейтом модальности.

Соглашение о векторах — строки: h = x·W_0 + Σ_i ω_i^m · x·B_i·A_i,
B_i ∈ R^{d_in×r_e}, A_i ∈ R^{r_e×d_out}. Масштаб α/r не применяется.
"""

import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from app.core.exceptions import ShapeError, UnknownModalityError
from app.models.domain import Modality
from app.models.reports import ParamCount
from app.services import numerics as nx
from app.services.numerics import GradTape, Matrix, Tensor

log = logging.getLogger(__name__)


class LoraAdapter:
    """Стандартный LoRA: ΔW = B·A ранга ≤ r."""

    kind = "lora"

    def __init__(self, d_in: int, d_out: int, rank: int = 8,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.d_in, self.d_out, self.rank = d_in, d_out, rank
        self.B: Matrix = np.zeros((d_in, rank))
        self.A: Matrix = rng.normal(0.0, 0.02, size=(rank, d_out))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"B": self.B, "A": self.A}

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        self.B = np.array(values["B"], dtype=np.float64)
        self.A = np.array(values["A"], dtype=np.float64)

    def first_b(self) -> str:
        return "B"

    def delta_weight(self, modality: Optional[Modality] = None) -> Matrix:
        return self.B @ self.A

    def param_count(self) -> ParamCount:
        return ParamCount(expert_params=self.B.size + self.A.size, gate_params=0)

    def forward_tensor(self, params: Mapping[str, Tensor], site, x: Tensor, modality) -> Tensor:
        base = nx.matmul(x, nx.Tensor(site.weight(modality)))
        return nx.add(base, nx.matmul(nx.matmul(x, params["B"]), params["A"]))

    def forward(self, site, x, modality) -> np.ndarray:
        return _plain_forward(self, site, x, modality)


class ModaAdapter:
    """Эксперты {B_i, A_i}, эмбеддинги модальностей Emb_m и линейный гейт R^{d_g} → R^{N_e}."""

    kind = "moda"

    def __init__(self, d_in: int, d_out: int, rank: int = 8, n_experts: int = 4, gate_dim: int = 8,
                 gate_activation: str = "softmax",
                 modalities: Iterable[Modality] = (Modality.TEXT, Modality.IMAGE),
                 rng: Optional[np.random.Generator] = None):
        if rank % n_experts != 0:
            raise ShapeError(f"rank={rank} не делится на n_experts={n_experts}")
        rng = rng or np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        self.rank, self.n_experts, self.gate_dim = rank, n_experts, gate_dim
        self.expert_rank = rank // n_experts
        self.gate_activation = gate_activation

        self.experts: List[List[Matrix]] = [
            [np.zeros((d_in, self.expert_rank)), rng.normal(0.0, 0.02, size=(self.expert_rank, d_out))]
            for _ in range(n_experts)
        ]
        self.gate_weight: Matrix = np.zeros((gate_dim, n_experts))
        self.gate_bias: np.ndarray = np.zeros(n_experts)
        self.modality_embeddings: Dict[Modality, np.ndarray] = {
            Modality(m): rng.normal(0.0, 1.0, size=gate_dim) for m in modalities
        }

    # ---------------------------------------------------------------

    def parameters(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for i, (B, A) in enumerate(self.experts):
            params[f"experts.{i}.B"] = B
            params[f"experts.{i}.A"] = A
        params["gate.weight"] = self.gate_weight
        params["gate.bias"] = self.gate_bias
        for m, emb in self.modality_embeddings.items():
            params[f"emb.{m.value}"] = emb
        return params

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        for i in range(self.n_experts):
            self.experts[i] = [
                np.array(values[f"experts.{i}.B"], dtype=np.float64),
                np.array(values[f"experts.{i}.A"], dtype=np.float64),
            ]
        self.gate_weight = np.array(values["gate.weight"], dtype=np.float64)
        self.gate_bias = np.array(values["gate.bias"], dtype=np.float64)
        for m in list(self.modality_embeddings):
            self.modality_embeddings[m] = np.array(values[f"emb.{m.value}"], dtype=np.float64)

    def first_b(self) -> str:
        return "experts.0.B"

    def _check_modality(self, modality) -> Modality:
        try:
            m = Modality(modality)
        except ValueError:
            m = None
        if m is None or m not in self.modality_embeddings:
            registered = ", ".join(x.value for x in self.modality_embeddings)
            raise UnknownModalityError(f"Модальность {modality!r} не зарегистрирована; есть: {registered}")
        return m

    def gate_tensor(self, params: Mapping[str, Tensor], modality) -> Tensor:
        """ω^m = activation(Emb_m·G + b) как операция ленты, форма (N_e,)."""
        m = self._check_modality(modality)
        emb = nx.reshape(params[f"emb.{m.value}"], (1, self.gate_dim))
        logits = nx.add(nx.matmul(emb, params["gate.weight"]), params["gate.bias"])
        if self.gate_activation == "softmax":
            logits = nx.softmax(logits)
        return nx.reshape(logits, (self.n_experts,))

    def gate_weights(self, modality) -> np.ndarray:
        return self.gate_tensor(_constants(self.parameters()), modality).data

    def delta_weight(self, modality) -> Matrix:
        """Σ_i ω_i^m B_i A_i, ранг ≤ r."""
        omega = self.gate_weights(modality)
        delta = np.zeros((self.d_in, self.d_out))
        for w, (B, A) in zip(omega, self.experts):
            delta = delta + w * (B @ A)
        return delta

    def param_count(self) -> ParamCount:
        experts = sum(B.size + A.size for B, A in self.experts)
        gate = self.gate_weight.size + self.gate_bias.size + sum(e.size for e in self.modality_embeddings.values())
        return ParamCount(expert_params=experts, gate_params=gate)

    def forward_tensor(self, params: Mapping[str, Tensor], site, x: Tensor, modality) -> Tensor:
        # ω^m считается один раз на вызов (батч) и общий для всех строк x
        omega = self.gate_tensor(params, modality)
        base = nx.matmul(x, nx.Tensor(site.weight(modality)))
        branches = [
            nx.matmul(nx.matmul(x, params[f"experts.{i}.B"]), params[f"experts.{i}.A"])
            for i in range(self.n_experts)
        ]
        return nx.add(base, nx.mix(omega, branches))

    def forward(self, site, x, modality) -> np.ndarray:
        return _plain_forward(self, site, x, modality)


def _constants(values: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: nx.Tensor(v) for name, v in values.items()}


def _plain_forward(adapter, site, x, modality) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.shape[1] != adapter.d_in:
        raise ShapeError(f"{site.name}: вход ширины {x2.shape[1]}, ожидалось {adapter.d_in}")
    h = adapter.forward_tensor(_constants(adapter.parameters()), site, nx.Tensor(x2), modality).data
    return h[0] if single else h


class BoundAdapter:
    """Адаптер с параметрами-тензорами: зарегистрированными на ленте или константами."""

    def __init__(self, adapter, params: Dict[str, Tensor]):
        self.adapter = adapter
        self.params = params

    def forward(self, site, x: Tensor, modality) -> Tensor:
        return self.adapter.forward_tensor(self.params, site, x, modality)


class AdapterSet:
    """Адаптеры по именам слоёв энкодера; один тип на весь набор."""

    def __init__(self, kind: str, adapters: Optional[Dict[str, object]] = None):
        self.kind = kind
        self.adapters: Dict[str, object] = dict(adapters or {})

    @classmethod
    def build(cls, encoder, kind: str, sites: Sequence[str], rank: int = 8, n_experts: int = 4,
              gate_dim: int = 8, gate_activation: str = "softmax", seed: int = 0) -> "AdapterSet":
        """Свежие адаптеры на указанных слоях; kind ∈ {moda, lora}."""
        adapters = {}
        for j, name in enumerate(sites):
            site = encoder.site(name)
            rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
            if kind == "moda":
                adapters[name] = ModaAdapter(
                    site.d_in, site.d_out, rank=rank, n_experts=n_experts, gate_dim=gate_dim,
                    gate_activation=gate_activation, rng=rng,
                )
            elif kind == "lora":
                adapters[name] = LoraAdapter(site.d_in, site.d_out, rank=rank, rng=rng)
            else:
                raise ValueError(f"Неизвестный тип адаптера: {kind}")
        log.info(f"Создано {len(adapters)} адаптеров {kind}: {', '.join(adapters)}")
        return cls(kind, adapters)

    def __len__(self) -> int:
        return len(self.adapters)

    def __contains__(self, name: str) -> bool:
        return name in self.adapters

    def __getitem__(self, name: str):
        return self.adapters[name]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Плоский словарь `site.param` → массив."""
        return {
            f"{site}.{name}": value
            for site, adapter in self.adapters.items()
            for name, value in adapter.parameters().items()
        }

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        for site, adapter in self.adapters.items():
            prefix = f"{site}."
            adapter.load_parameters({k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)})

    def bind(self, tape: Optional[GradTape], exclude_sites: Iterable[str] = ()) -> Dict[str, BoundAdapter]:
        """Привязка к ленте (обучение) или к константам (tape=None, инференс)."""
        bound = {}
        skip = set(exclude_sites)
        for site, adapter in self.adapters.items():
            values = adapter.parameters()
            if tape is not None and site not in skip:
                params = tape.params(values, prefix=f"{site}.")
            else:
                params = _constants(values)
            bound[site] = BoundAdapter(adapter, params)
        return bound

    def param_count(self) -> ParamCount:
        counts = [a.param_count() for a in self.adapters.values()]
        return ParamCount(
            expert_params=sum(c.expert_params for c in counts),
            gate_params=sum(c.gate_params for c in counts),
        )


def parameter_group(name: str) -> str:
    """Группа параметра для телеметрии: B, A, gate или emb."""
    parts = name.split(".")
    if parts[-1] in ("B", "A"):
        return parts[-1]
    if "gate" in parts:
        return "gate"
    if "emb" in parts:
        return "emb"
    return parts[-1]
