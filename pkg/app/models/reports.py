"""Pydantic-модели отчётов, которые пишутся на диск и печатаются CLI."""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class GradCheckReport(BaseModel):
    """Сравнение градиента ленты с центральными разностями."""
    passed: bool
    max_error: float
    worst_param: Optional[str] = None
    worst_index: Optional[List[int]] = None
    n_checked: int = 0
    tol: float


class ParamCount(BaseModel):
    expert_params: int
    gate_params: int = 0


class StepRecord(BaseModel):
    step: int
    loss: float
    grad_norms: Dict[str, float] = Field(default_factory=dict)
    wall_time: float


class TrainLog(BaseModel):
    """Телеметрия первого этапа: лосс и нормы градиентов по группам параметров."""
    records: List[StepRecord] = Field(default_factory=list)

    @property
    def initial_loss(self) -> Optional[float]:
        return self.records[0].loss if self.records else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.records[-1].loss if self.records else None


class MetricBlock(BaseModel):
    hit: float = Field(..., description="Hit@K")
    ndcg: float = Field(..., description="NDCG@K")


class RankingResult(BaseModel):
    """Позиция целевого айтема пользователя в полном ранжировании."""
    user: str
    target: str
    rank: int
    hit: int
    ndcg: float
    tail: bool


class MetricsReport(BaseModel):
    """Overall/Tail H@K и N@K — колонки основной таблицы результатов."""
    k: int
    overall: MetricBlock
    tail: Optional[MetricBlock] = Field(None, description="None, если хвостовых пользователей нет")
    n_users: int
    n_tail_users: int
    n_excluded_users: int

    def table(self) -> str:
        """Текстовая таблица Overall/Tail для вывода в консоль."""
        k = self.k
        tail_h = f"{self.tail.hit:.4f}" if self.tail else "—"
        tail_n = f"{self.tail.ndcg:.4f}" if self.tail else "—"
        return "\n".join([
            f"{'':8} {'H@' + str(k):>8} {'N@' + str(k):>8}",
            f"{'Overall':8} {self.overall.hit:>8.4f} {self.overall.ndcg:>8.4f}",
            f"{'Tail':8} {tail_h:>8} {tail_n:>8}",
            f"users={self.n_users} tail_users={self.n_tail_users} excluded={self.n_excluded_users}",
        ])


class ConflictEntry(BaseModel):
    adapter: str
    site: str
    seed: int
    cosine: Optional[float] = Field(None, description="None при вырожденной норме градиента")
    text_norm: float
    image_norm: float
    decomposition_residual: float = Field(..., description="‖g_text + g_image − g_full‖ по B")


class ConflictReport(BaseModel):
    """Косинусы модально-изолированных градиентов на матрицах B."""
    entries: List[ConflictEntry] = Field(default_factory=list)
    batch: Dict[str, int] = Field(default_factory=dict)
    median: Dict[str, Dict[str, Optional[float]]] = Field(default_factory=dict)


class VariantRow(BaseModel):
    """Строка сравнительного отчёта (абляция, экстракторы, модальности)."""
    name: str
    description: str = ""
    metrics: MetricsReport
    delta_overall: Optional[float] = Field(None, description="Средний относительный сдвиг H и N, %")
    delta_tail: Optional[float] = None


class ComparisonReport(BaseModel):
    kind: str
    rows: List[VariantRow] = Field(default_factory=list)
    failed: Dict[str, str] = Field(default_factory=dict)
