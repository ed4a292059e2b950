"""Плотная линейная алгебра, устойчивые softmax/KL и обратный автодифф для малых графов.

Лента (GradTape) — реестр обучаемых параметров по стабильным именам плюс
проход назад по графу Tensor. Набор примитивов закрыт: всё, что нужно
энкодеру, адаптерам, лоссам выравнивания и рекомендерам.
"""

import logging
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from app.core.exceptions import NumericsError
from app.models.reports import GradCheckReport

log = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]

PROB_FLOOR = 1e-12
MASK_VALUE = -1e9


# ====================== ЧИСТЫЕ ФУНКЦИИ ============================

def softmax_rows(m) -> Matrix:
    """Построчный softmax с вычитанием максимума."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m) -> Matrix:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def floor_probs(p) -> Matrix:
    """Ограничение вероятностей снизу перед логарифмом."""
    return np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)


def kl_div(t, p) -> float:
    """KL(t ‖ p) для двух распределений; 0·ln 0 = 0."""
    t = np.asarray(t, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise NumericsError(f"Разные длины распределений: {t.shape} и {p.shape}")
    for name, row in (("t", t), ("p", p)):
        if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-9:
            raise NumericsError(f"{name} не является распределением вероятностей")
    support = t > 0
    if np.any(p[support] == 0):
        j = int(np.flatnonzero(support & (p == 0))[0])
        raise NumericsError(f"p[{j}] = 0 при t[{j}] > 0: не хватает отсечки вероятностей")
    return float(np.sum(t[support] * (np.log(t[support]) - np.log(p[support]))))


# ====================== ТЕНЗОР И ЛЕНТА ============================

class Tensor:
    """Узел графа: значение, накопленный градиент и замыкание обратного шага."""

    __slots__ = ("data", "grad", "name", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, name: Optional[str] = None, requires_grad: bool = False, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.requires_grad = requires_grad
        self.op = op
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op or 'leaf'}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Константа (без градиента), если на вход пришёл не Tensor."""
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x) -> Tensor:
    """Отсекает граф: значение то же, градиент не течёт."""
    return Tensor(as_tensor(x).data)


class GradTape:
    """Реестр параметров по именам и проход назад в обратном топологическом порядке."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def param(self, name: str, value) -> Tensor:
        if name in self._params:
            raise NumericsError(f"Параметр {name} уже зарегистрирован на ленте")
        t = Tensor(np.array(value, dtype=np.float64), name=name, requires_grad=True, op="param")
        self._params[name] = t
        return t

    def params(self, values: Mapping[str, np.ndarray], prefix: str = "") -> Dict[str, Tensor]:
        """Регистрирует набор параметров; ключи результата — без префикса."""
        return {name: self.param(f"{prefix}{name}", value) for name, value in values.items()}

    @property
    def names(self) -> List[str]:
        return list(self._params)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """Градиенты всех зарегистрированных параметров; недостижимые — точные нули."""
        if loss.data.size != 1:
            raise NumericsError(f"backward ожидает скаляр, получена форма {loss.shape}")

        order = _topological_order(loss)
        for node in order:
            node.grad = None
        for p in self._params.values():
            p.grad = None

        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            contributions = node._backward(node.grad)
            for parent, g in zip(node._parents, contributions):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

        return {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in self._params.items()
        }


def _topological_order(root: Tensor) -> List[Tensor]:
    """Итеративный DFS: каждый узел попадает в порядок ровно один раз."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _make(value, parents: Iterable, op: str, backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(value, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Сворачивает градиент broadcast-операции до формы операнда."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ====================== ПРИМИТИВЫ ============================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Поэлементное произведение с broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul: несовместимые формы {a.shape} и {b.shape}")
    return _make(
        a.data @ b.data, (a, b), "matmul",
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def log(a) -> Tensor:
    """Логарифм с отсечкой аргумента снизу на PROB_FLOOR."""
    a = as_tensor(a)
    clipped = a.data < PROB_FLOOR
    x = np.maximum(a.data, PROB_FLOOR)
    return _make(np.log(x), (a,), "log", lambda g: (np.where(clipped, 0.0, g / x),))


def log_sigmoid(a) -> Tensor:
    """log σ(x) = −softplus(−x), устойчиво при больших |x|."""
    a = as_tensor(a)
    y = -np.logaddexp(0.0, -a.data)
    # d/dx log σ(x) = σ(−x) = exp(−softplus(x))
    return _make(y, (a,), "log_sigmoid", lambda g: (g * np.exp(-np.logaddexp(0.0, a.data)),))


def softmax(a) -> Tensor:
    """Построчный softmax как операция ленты."""
    a = as_tensor(a)
    y = softmax_rows(a.data)
    return _make(
        y, (a,), "softmax",
        lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),),
    )


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    y = log_softmax_rows(a.data)
    p = np.exp(y)
    return _make(
        y, (a,), "log_softmax",
        lambda g: (g - p * np.sum(g, axis=1, keepdims=True),),
    )


def sum_(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), "sum", backward)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def dot(a, b) -> Tensor:
    """Построчное скалярное произведение (N×d, N×d) → (N,) или векторов → скаляр."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise NumericsError(f"dot: разные формы {a.shape} и {b.shape}")
    axis = a.data.ndim - 1
    value = np.sum(a.data * b.data, axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        return (g * b.data, g * a.data)

    return _make(value, (a, b), "dot", backward)


def l2_normalize(a) -> Tensor:
    """Построчная L2-нормализация."""
    a = as_tensor(a)
    norms = np.maximum(np.linalg.norm(a.data, axis=-1, keepdims=True), PROB_FLOOR)
    y = a.data / norms
    return _make(
        y, (a,), "l2_normalize",
        lambda g: ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norms,),
    )


def mean_pool(a, group: int) -> Tensor:
    """(N·group × d) → (N × d): среднее по подряд идущим группам строк (токенам)."""
    a = as_tensor(a)
    rows, cols = a.shape
    if rows % group != 0:
        raise NumericsError(f"mean_pool: {rows} строк не делится на группы по {group}")
    value = a.data.reshape(rows // group, group, cols).mean(axis=1)
    return _make(value, (a,), "mean_pool", lambda g: (np.repeat(g / group, group, axis=0),))


def take_rows(a, index) -> Tensor:
    """Выбор строк по индексам (lookup эмбеддингов)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), "take_rows", backward)


def pick(a, columns) -> Tensor:
    """a[i, columns[i]] для каждой строки i."""
    a = as_tensor(a)
    cols = np.asarray(columns, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)

    return _make(a.data[rows, cols], (a,), "pick", backward)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", backward)


def mix(weights, tensors: Sequence) -> Tensor:
    """Σ_i w_i · t_i: взвешенная сумма тензоров одной формы со скалярными весами."""
    w = as_tensor(weights)
    ts = [as_tensor(t) for t in tensors]
    if w.shape != (len(ts),):
        raise NumericsError(f"mix: {w.shape[0] if w.data.ndim else 0} весов на {len(ts)} тензоров")
    value = w.data[0] * ts[0].data
    for i in range(1, len(ts)):
        value = value + w.data[i] * ts[i].data

    def backward(g):
        gw = np.array([np.sum(g * t.data) for t in ts])
        return (gw, *[w.data[i] * g for i in range(len(ts))])

    return _make(value, (w, *ts), "mix", backward)


# ====================== ПРОВЕРКА ГРАДИЕНТОВ ============================

Objective = Callable[[GradTape, Dict[str, Tensor]], Tensor]


def grad_check(f: Objective, params: Mapping[str, np.ndarray], eps: float = 1e-6,
               tol: float = 1e-4, max_coords: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """
    Сравнивает градиент ленты с центральными разностями.

    Относительная ошибка |a − n| / max(|a|, |n|); при величинах ниже 1e-8 —
    абсолютная. Не бросает исключение: провал отражается в отчёте с худшей
    координатой. max_coords ограничивает число проверяемых координат на параметр
    (случайная выборка по seed).
    """
    values = {name: np.array(v, dtype=np.float64) for name, v in params.items()}

    tape = GradTape()
    tensors = tape.params(values)
    analytic = tape.backward(as_tensor(f(tape, tensors)))

    def evaluate(perturbed: Dict[str, np.ndarray]) -> float:
        t = GradTape()
        return as_tensor(f(t, t.params(perturbed))).item()

    rng = np.random.default_rng(seed)
    worst_error, worst_param, worst_index, checked = 0.0, None, None, 0
    for name, value in values.items():
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))
        for flat in coords:
            plus = {k: v.copy() for k, v in values.items()}
            minus = {k: v.copy() for k, v in values.items()}
            plus[name].flat[flat] += eps
            minus[name].flat[flat] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
            a = float(analytic[name].flat[flat])
            magnitude = max(abs(a), abs(numeric))
            error = abs(a - numeric) / magnitude if magnitude >= 1e-8 else abs(a - numeric)
            checked += 1
            if error > worst_error or not np.isfinite(error):
                worst_error = error if np.isfinite(error) else float("inf")
                worst_param = name
                worst_index = [int(i) for i in np.unravel_index(flat, value.shape)] if value.shape else []

    report = GradCheckReport(
        passed=worst_error < tol, max_error=worst_error, worst_param=worst_param,
        worst_index=worst_index, n_checked=checked, tol=tol,
    )
    if not report.passed:
        log.warning(f"Проверка градиента провалена: {worst_param}{worst_index} ошибка {worst_error:.3e}")
    return report
