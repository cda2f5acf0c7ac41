"""
Moteur minimal de différentiation en mode inverse (float64, adjoints analytiques)

Chaque opération calcule sa valeur avec numpy/scipy puis, si une bande (Tape) est active
et qu'une entrée requiert un gradient, enregistre une fermeture qui renvoie les adjoints
de ses entrées. Le balayage inverse parcourt la bande dans l'ordre inverse d'exécution,
qui est un ordre topologique inverse, et accumule les adjoints.
"""
import logging
import math
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, ndtr

from config.settings import (
    ADAM_BETAS,
    ADAM_EPS,
    GRAD_CHECK_STEP,
    GRADIENT_CLIP,
    L2_NORMALIZE_EPS,
    LAYER_NORM_EPS,
)
from src.exceptions import NumericFault, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# =====================================================
# TENSEUR ET BANDE
# =====================================================

class Tensor:
    """Tableau float64 éventuellement suivi par la bande"""

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericFault(name or "Tensor")
        self.value = array
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.value = value
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item", f"tenseur de forme {self.shape} non scalaire")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.value.copy(), False)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} grad={self.requires_grad}>"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)
    def __rmul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(other, self)
    def __truediv__(self, other):
        return scale(self, 1.0 / other) if np.isscalar(other) else div(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)


Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class _Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tape:
    """Enregistrement des opérations pour un balayage inverse (propriétaire unique)"""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor,
                 params: Union["ParameterSet", Mapping[str, Tensor], Sequence[Tensor]],
                 seed: Optional[np.ndarray] = None) -> Union[Dict[str, np.ndarray], List[np.ndarray]]:
        """
        Balayage inverse depuis `loss`

        Args:
            loss: Tenseur de sortie (scalaire sauf si `seed` est fourni)
            params: Paramètres dont on veut les gradients
            seed: Adjoint initial (par défaut 1 pour une sortie scalaire)

        Returns:
            Gradients dans la même structure que `params` (zéros pour les paramètres inutilisés)
        """
        if seed is None:
            if loss.value.size != 1:
                raise ShapeError("gradient", f"sortie non scalaire {loss.shape} sans adjoint initial")
            seed = np.ones_like(loss.value)
        adjoints: Dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}

        for node in reversed(self.nodes):
            upstream = adjoints.get(id(node.output))
            if upstream is None:
                continue
            input_grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if not np.all(np.isfinite(grad)):
                    raise NumericFault(f"gradient de {node.op}")
                key = id(tensor)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + grad
                else:
                    adjoints[key] = grad

        def _grad_of(tensor: Tensor) -> np.ndarray:
            grad = adjoints.get(id(tensor))
            return np.zeros_like(tensor.value) if grad is None else np.array(grad, dtype=np.float64).reshape(tensor.shape)

        if isinstance(params, (ParameterSet, Mapping)):
            return {name: _grad_of(tensor) for name, tensor in params.items()}
        return [_grad_of(tensor) for tensor in params]


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(value: np.ndarray) -> Tensor:
    """Tenseur sans gradient partageant le tableau fourni (lecture seule attendue)"""
    return Tensor._wrap(np.asarray(value, dtype=np.float64), False)


def _emit(op: str, value: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericFault(op)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, requires)
    tape = _ACTIVE_TAPE.get()
    if requires and tape is not None:
        tape.record(_Node(op, inputs, out, backward))
    return out


def custom_op(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    """Enregistre une opération définie hors du moteur (valeur et adjoint fournis par l'appelant)"""
    return _emit(op, np.asarray(value, dtype=np.float64), tuple(inputs), backward)


def _reducer(op: str, target: Tuple[int, ...], other: Tuple[int, ...]) -> Callable[[np.ndarray], np.ndarray]:
    """Réduction d'adjoint pour la diffusion matrice-vecteur (biais)"""
    if target == other:
        return lambda g: g
    if len(other) == 2 and (target == (other[1],) or target == (1, other[1])):
        return lambda g: g.sum(axis=0).reshape(target)
    if len(target) == 2 and (other == (target[1],) or other == (1, target[1])):
        return lambda g: g
    raise ShapeError(op, f"{target} contre {other}")


# =====================================================
# OPÉRATIONS ÉLÉMENTAIRES
# =====================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    red_a = _reducer("add", a.shape, b.shape)
    red_b = _reducer("add", b.shape, a.shape)
    return _emit("add", a.value + b.value, (a, b), lambda g: (red_a(g), red_b(g)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    red_a = _reducer("sub", a.shape, b.shape)
    red_b = _reducer("sub", b.shape, a.shape)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (red_a(g), -red_b(g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    red_a = _reducer("mul", a.shape, b.shape)
    red_b = _reducer("mul", b.shape, a.shape)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (red_a(g * bv), red_b(g * av)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    red_a = _reducer("div", a.shape, b.shape)
    red_b = _reducer("div", b.shape, a.shape)
    av, bv = a.value, b.value
    return _emit("div", av / bv, (a, b),
                 lambda g: (red_a(g / bv), red_b(-g * av / (bv * bv))))


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _emit("scale", x.value * factor, (x,), lambda g: (g * factor,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value < 0):
        raise NumericFault("sqrt (argument négatif)")
    root = np.sqrt(x.value)
    return _emit("sqrt", root, (x,), lambda g: (g / (2.0 * root),))


def sum(x) -> Tensor:  # noqa: A001 - nom de l'opération du moteur
    x = as_tensor(x)
    shape = x.shape
    return _emit("sum", np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_rows(x) -> Tensor:
    """Moyenne sur les lignes, résultat (1, d)"""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("mean_rows", f"attendu 2-D, reçu {x.shape}")
    n = x.shape[0]
    return _emit("mean_rows", x.value.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("transpose", f"attendu 2-D, reçu {x.shape}")
    return _emit("transpose", x.value.T.copy(), (x,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat", "aucune entrée")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", str(e))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", value, tensors, backward)


def take_rows(x, index: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("take_rows", f"indice hors bornes pour {x.shape[0]} lignes")

    def backward(g):
        grad = np.zeros_like(x.value)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("take_rows", x.value[index], (x,), backward)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError("slice_cols", f"[{start}:{stop}] sur {x.shape}")

    def backward(g):
        grad = np.zeros_like(x.value)
        grad[:, start:stop] = g
        return (grad,)

    return _emit("slice_cols", x.value[:, start:stop].copy(), (x,), backward)


def mean_over_neighbors(adjacency: sp.spmatrix, h, normalized: bool = False) -> Tensor:
    """
    Agrégation moyenne D^-1 A h (ligne nulle pour un nœud sans voisin)

    Args:
        adjacency: Matrice creuse (n_dst x n_src), 0/1 ou déjà normalisée par ligne
        h: Représentations des nœuds sources (n_src x d)
        normalized: True si `adjacency` est déjà normalisée par ligne
    """
    h = as_tensor(h)
    if h.ndim != 2 or adjacency.shape[1] != h.shape[0]:
        raise ShapeError("mean_over_neighbors", f"{adjacency.shape} contre {h.shape}")
    operator = sp.csr_matrix(adjacency) if normalized else row_normalize(adjacency)
    operator_t = operator.T.tocsr()
    return _emit("mean_over_neighbors", np.asarray(operator @ h.value), (h,),
                 lambda g: (np.asarray(operator_t @ g),))


def row_normalize(adjacency: sp.spmatrix) -> sp.csr_matrix:
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    inverse = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    return sp.diags(inverse) @ adjacency


# =====================================================
# NON-LINÉARITÉS ET NORMALISATIONS
# =====================================================

def gelu(x) -> Tensor:
    """GELU exacte x·Φ(x)"""
    x = as_tensor(x)
    xv = x.value
    cdf = ndtr(xv)
    pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
    return _emit("gelu", xv * cdf, (x,), lambda g: (g * (cdf + xv * pdf),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.value)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.value > 0
    return _emit("relu", np.where(positive, x.value, 0.0), (x,), lambda g: (g * positive,))


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalisation par ligne sur le dernier axe, sans gain ni biais"""
    x = as_tensor(x)
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered / std

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return ((g - g_mean - y * gy_mean) / std,)

    return _emit("layer_norm", y, (x,), backward)


def l2_normalize(x, eps: float = L2_NORMALIZE_EPS) -> Tensor:
    """Normalisation L2 par ligne; un vecteur nul est une erreur"""
    x = as_tensor(x)
    norm = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise NumericFault("l2_normalize (vecteur nul)")
    y = x.value / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit("l2_normalize", y, (x,), backward)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits, labels: Sequence[int], rows: Optional[Sequence[int]] = None,
                  reduction: str = "sum") -> Tensor:
    """
    Entropie croisée mono-étiquette sur un sous-ensemble de lignes

    Args:
        logits: Matrice (n x C)
        labels: Classe cible de chaque ligne retenue
        rows: Lignes retenues (toutes par défaut)
        reduction: 'sum' ou 'mean'

    Returns:
        Tensor: Scalaire
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", f"logits 2-D attendus, reçu {logits.shape}")
    n, n_classes = logits.shape
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != rows.shape:
        raise ShapeError("cross_entropy", f"{labels.shape[0]} étiquettes pour {rows.shape[0]} lignes")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError("cross_entropy", "étiquette hors des classes")
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise ShapeError("cross_entropy", "ligne hors bornes")
    if reduction not in ("sum", "mean"):
        raise ShapeError("cross_entropy", f"réduction inconnue '{reduction}'")

    z = logits.value[rows]
    z_max = z.max(axis=1, keepdims=True) if rows.size else np.zeros((0, 1))
    log_norm = np.log(np.exp(z - z_max).sum(axis=1, keepdims=True)) + z_max
    log_probs = z - log_norm
    picked = log_probs[np.arange(rows.size), labels]
    weight = 1.0 / rows.size if (reduction == "mean" and rows.size) else 1.0
    value = np.asarray(-picked.sum() * weight)

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(rows.size), labels] -= 1.0
        grad = np.zeros_like(logits.value)
        np.add.at(grad, rows, probs * (float(g) * weight))
        return (grad,)

    return _emit("cross_entropy", value, (logits,), backward)


def gaussian_rbf(x, y, bandwidths: Sequence[float]) -> Tensor:
    """
    Noyau gaussien moyen sur un ensemble de largeurs: k(u,v) = moyenne_γ exp(-||u-v||²/(2γ²))

    Returns:
        Tensor: Matrice (n x m)
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError("gaussian_rbf", f"{x.shape} contre {y.shape}")
    gammas = np.asarray(bandwidths, dtype=np.float64)
    if gammas.size == 0 or np.any(gammas <= 0):
        raise ShapeError("gaussian_rbf", "largeurs de bande strictement positives requises")
    xv, yv = x.value, y.value
    sq = (xv * xv).sum(axis=1)[:, None] + (yv * yv).sum(axis=1)[None, :] - 2.0 * xv @ yv.T
    sq = np.maximum(sq, 0.0)
    kernels = [np.exp(-sq / (2.0 * gamma * gamma)) for gamma in gammas]
    value = np.mean(kernels, axis=0)

    def backward(g):
        coeff = np.zeros_like(sq)
        for gamma, kernel in zip(gammas, kernels):
            coeff -= kernel / (gamma * gamma)
        coeff *= g / gammas.size
        grad_x = coeff.sum(axis=1)[:, None] * xv - coeff @ yv
        grad_y = coeff.sum(axis=0)[:, None] * yv - coeff.T @ xv
        return grad_x, grad_y

    return _emit("gaussian_rbf", value, (x, y), backward)


# =====================================================
# VÉRIFICATION DES GRADIENTS
# =====================================================

def grad_check(fn: Callable[[Tensor], Tensor], point: ArrayLike, step: float = GRAD_CHECK_STEP) -> float:
    """
    Compare le gradient en mode inverse aux différences finies centrées

    Args:
        fn: Fonction scalaire d'un tenseur
        point: Point d'évaluation
        step: Pas des différences finies

    Returns:
        float: max |analytique - numérique| / max(1, |numérique|)
    """
    base = np.array(point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    if out.value.size != 1:
        raise ShapeError("grad_check", "fonction non scalaire")
    analytic = tape.gradient(out, [x])[0]

    worst = 0.0
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        f_plus = fn(Tensor(plus)).item()
        f_minus = fn(Tensor(minus)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericFault("grad_check")
        numeric = (f_plus - f_minus) / (2.0 * step)
        worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


# =====================================================
# PARAMÈTRES ET OPTIMISEUR
# =====================================================

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParameterSet:
    """Paramètres nommés d'un modèle (ordre d'insertion conservé)"""

    def __init__(self, values: Optional[Mapping[str, ArrayLike]] = None):
        self._params: Dict[str, Tensor] = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name: str, value: ArrayLike) -> Tensor:
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self._params.items()}

    def restore(self, snapshot: Mapping[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            if self._params[name].shape != np.shape(value):
                raise ShapeError("restore", f"{name}: {self._params[name].shape} contre {np.shape(value)}")
            self._params[name].value = np.array(value, dtype=np.float64)

    def frozen(self) -> Dict[str, Tensor]:
        """Vue constante: aucun adjoint ne peut s'accumuler dans ces paramètres"""
        return {name: Tensor._wrap(t.value.copy(), False) for name, t in self._params.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.snapshot())

    def to_payload(self) -> Dict[str, Dict[str, list]]:
        return {name: {"shape": list(t.shape), "values": t.value.ravel().tolist()}
                for name, t in self._params.items()}

    @classmethod
    def from_payload(cls, payload: Mapping[str, Mapping[str, list]]) -> "ParameterSet":
        return cls({name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
                    for name, entry in payload.items()})


@dataclass
class AdamState:
    """Moments adaptatifs de AdamW"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], threshold: float) -> Dict[str, np.ndarray]:
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()]))) if grads else 0.0
    if threshold is None or total <= threshold or total == 0.0:
        return dict(grads)
    factor = threshold / total
    return {name: g * factor for name, g in grads.items()}


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
                   lr: float, weight_decay: float = 0.0, betas: Tuple[float, float] = ADAM_BETAS,
                   eps: float = ADAM_EPS, clip: Optional[float] = GRADIENT_CLIP) -> Dict[str, np.ndarray]:
    """
    Un pas AdamW (décroissance découplée) avec écrêtage global de la norme du gradient

    Args:
        params: Valeurs courantes
        grads: Gradients (mêmes noms et formes)
        state: Moments, mis à jour sur place
        lr: Taux d'apprentissage
        weight_decay: Coefficient de décroissance découplée

    Returns:
        Dict[str, np.ndarray]: Nouvelles valeurs des paramètres

    Raises:
        NumericFault: Si un gradient contient NaN/Inf
    """
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError("optimizer_step", f"{name}: {np.shape(g)} contre {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"gradient de {name}")

    grads = clip_by_global_norm(grads, clip)
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    updated = {}
    for name, value in params.items():
        g = grads.get(name, np.zeros_like(value))
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat, v_hat = m / bias1, v / bias2
        updated[name] = value * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated


class AdamW:
    """Optimiseur AdamW attaché à un ParameterSet"""

    def __init__(self, params: ParameterSet, lr: float, weight_decay: float = 0.0,
                 clip: Optional[float] = GRADIENT_CLIP):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip = clip
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        updated = optimizer_step(self.params.snapshot(), grads, self.state, self.lr,
                                 weight_decay=self.weight_decay, clip=self.clip)
        self.params.restore(updated)


def iter_params(params: Iterable[Tensor]) -> Iterable[Tensor]:
    return (t for t in params if t.requires_grad)
