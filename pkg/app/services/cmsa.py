"""Кросс-модальное структурное выравнивание: матрица сходства, мягкий учитель, KL-лосс и InfoNCE."""

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional

import numpy as np

from app.core.exceptions import NumericsError, ShapeError
from app.services import numerics as nx
from app.services.numerics import Matrix, Tensor

log = logging.getLogger(__name__)

TeacherTempMode = Literal["multiply", "divide"]


@dataclass
class AlignmentBatch:
    """Батч из N айтемов: текстовые и визуальные эмбеддинги в одном порядке строк."""
    text: Tensor
    image: Tensor
    tau: float = 0.07
    item_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.text = nx.as_tensor(self.text)
        self.image = nx.as_tensor(self.image)
        if self.text.shape != self.image.shape or self.text.data.ndim != 2:
            raise ShapeError(f"E_t {self.text.shape} и E_v {self.image.shape} должны быть одной формы N×d_m")
        if self.tau <= 0:
            raise NumericsError(f"Температура должна быть > 0, получено {self.tau}")

    @property
    def n(self) -> int:
        return self.text.shape[0]


def similarity_tensor(batch: AlignmentBatch) -> Tensor:
    """S_ij = (e_i^t · e_j^v) / τ."""
    return nx.scale(nx.matmul(batch.text, nx.transpose(batch.image)), 1.0 / batch.tau)


def similarity_matrix(batch: AlignmentBatch) -> Matrix:
    return similarity_tensor(batch).data


def teacher_logits(batch: AlignmentBatch, mode: TeacherTempMode = "multiply") -> Tensor:
    """Усреднённые внутримодальные сходства; множитель τ/2 (как записано) или 1/(2τ)."""
    intra = nx.add(
        nx.matmul(batch.text, nx.transpose(batch.text)),
        nx.matmul(batch.image, nx.transpose(batch.image)),
    )
    factor = batch.tau / 2.0 if mode == "multiply" else 1.0 / (2.0 * batch.tau)
    return nx.scale(intra, factor)


def soft_target(batch: AlignmentBatch, mode: TeacherTempMode = "multiply") -> Matrix:
    """T_ij = Softmax_j(...), диагональ включена; строки стохастические."""
    return nx.softmax_rows(teacher_logits(batch, mode).data)


def _kl_rows(target: Matrix | Tensor, log_target: Tensor, log_p: Tensor) -> Tensor:
    """Σ_ij T_ij (log T_ij − log P_ij)."""
    return nx.sum_(nx.mul(target, nx.sub(log_target, log_p)))


def cmsa_loss(batch: AlignmentBatch, mode: TeacherTempMode = "multiply", detach_teacher: bool = True,
              teacher: Optional[Matrix] = None) -> Tensor:
    """
    Структурный контрастный лосс:
    L = 1/(2N) Σ_i [KL(T_i ‖ P_i) + KL(T_i ‖ P^T_i)], P = softmax(S), P^T = softmax(Sᵀ).

    Учитель второго направления совпадает с T (логиты учителя симметричны).
    teacher — подмена T фиксированной матрицей (тестовый хук).
    """
    n = batch.n
    if n < 2:
        raise NumericsError(f"Для лосса выравнивания нужен батч N >= 2, получено {n}")

    s = similarity_tensor(batch)
    log_p = nx.log_softmax(s)
    log_pt = nx.log_softmax(nx.transpose(s))

    if teacher is not None:
        t_value = np.asarray(teacher, dtype=np.float64)
        target = nx.Tensor(t_value)
        log_target = nx.Tensor(np.log(nx.floor_probs(t_value)))
    else:
        logits = teacher_logits(batch, mode)
        if detach_teacher:
            logits = nx.detach(logits)
        log_target = nx.log_softmax(logits)
        target = nx.softmax(logits)

    total = nx.add(_kl_rows(target, log_target, log_p), _kl_rows(target, log_target, log_pt))
    return nx.scale(total, 1.0 / (2.0 * n))


def infonce_loss(batch: AlignmentBatch) -> Tensor:
    """Симметричная кросс-энтропия S и Sᵀ против диагональных one-hot целей."""
    n = batch.n
    if n < 2:
        raise NumericsError(f"Для лосса выравнивания нужен батч N >= 2, получено {n}")
    s = similarity_tensor(batch)
    diag = np.arange(n)
    forward = nx.sum_(nx.pick(nx.log_softmax(s), diag))
    backward = nx.sum_(nx.pick(nx.log_softmax(nx.transpose(s)), diag))
    return nx.scale(nx.add(forward, backward), -1.0 / (2.0 * n))


def alignment_loss(batch: AlignmentBatch, loss: str = "cmsa", mode: TeacherTempMode = "multiply",
                   detach_teacher: bool = True) -> Tensor:
    if loss == "cmsa":
        return cmsa_loss(batch, mode=mode, detach_teacher=detach_teacher)
    if loss == "infonce":
        return infonce_loss(batch)
    raise ValueError(f"Неизвестный лосс выравнивания: {loss}")
