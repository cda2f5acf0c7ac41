"""
Générateur de triggers: features conditionnées par la victime (AdaIN), score de connexion par attention,
masquage aléatoire, sélection top-k différentiable et régularisation de diversité
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit

from config.settings import ADAIN_EPS, CHECKPOINT_FORMAT_VERSION, TOPK_MAX_ITER, TOPK_RESIDUAL_TOL
from src import diffmath as dm
from src.candidates import CandidatePool
from src.diffmath import ParameterSet, Tensor, glorot_uniform
from src.exceptions import ConfigurationError, InvariantError, SchemaError
from src.heterograph import GraphDelta, HeteroGraph, NewEdge, Relation, SchemaRoles
from src.schemas import TrojanConfig
from src.surrogate import SoftTriggerRows

logger = logging.getLogger(__name__)

_MAX_MASK_DRAWS = 1000
_ADAIN_VAR_FLOOR = 1e-24


# =====================================================
# NORMALISATION D'INSTANCE ADAPTATIVE
# =====================================================

@dataclass
class AdaINStats:
    """Moyenne et écart-type (population) par dimension des features déclencheurs propres"""
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = ADAIN_EPS

    @classmethod
    def from_features(cls, features: np.ndarray, eps: float = ADAIN_EPS) -> "AdaINStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ConfigurationError("Statistiques AdaIN: population de déclencheurs vide")
        return cls(features.mean(axis=0), features.std(axis=0), eps)

    def to_dict(self) -> Dict[str, Any]:
        return {'mu': self.mu.tolist(), 'sigma': self.sigma.tolist(), 'eps': self.eps}


def adain(batch: Union[Tensor, np.ndarray], stats: AdaINStats) -> Tensor:
    """
    x̂ = σ_clean ⊙ (x − μ_batch) / (σ_batch + ε) + μ_clean (écart-type de population du lot)

    Un lot d'une seule ligne utilise σ_batch = 0 (sortie μ_clean) et émet un avertissement.
    """
    batch = dm.as_tensor(batch)
    if batch.ndim != 2 or batch.shape[1] != stats.mu.shape[0]:
        raise SchemaError(f"AdaIN: lot {batch.shape} incompatible avec {stats.mu.shape[0]} dimensions")
    centered = dm.sub(batch, dm.mean_rows(batch))
    if batch.shape[0] < 2:
        logger.warning("⚠️ AdaIN sur un lot d'une seule ligne: σ_batch = ε")
        spread = dm.constant(np.full((1, batch.shape[1]), stats.eps))
    else:
        variance = dm.mean_rows(dm.mul(centered, centered))
        spread = dm.add(dm.sqrt(dm.add(variance, np.full((1, batch.shape[1]), _ADAIN_VAR_FLOOR))),
                        np.full((1, batch.shape[1]), stats.eps))
    normalized = dm.div(centered, spread)
    return dm.add(dm.mul(normalized, stats.sigma.reshape(1, -1)), stats.mu.reshape(1, -1))


# =====================================================
# TOP-K DIFFÉRENTIABLE
# =====================================================

@dataclass
class TopKState:
    """Décalage t tel que Σ σ(x_i + t) = k, et v_i = σ'(x_i + t)"""
    shift: float
    v: np.ndarray
    residual: float
    selection: Optional[np.ndarray] = None


def solve_shift(x: np.ndarray, k: int, xtol: float = 1e-13) -> TopKState:
    """
    Résout Σ_i σ(x_i + t) = k par bissection sur les entrées finies

    Raises:
        ConfigurationError: Si k ∉ [1, nombre d'entrées finies]
    """
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    n = x.size
    if not 1 <= k <= n:
        raise ConfigurationError(f"k={k} hors de [1, {n}] pour la résolution du décalage")
    margin = 40.0 + math.log(n)
    low, high = -x.max() - margin, -x.min() + margin

    def constraint(t: float) -> float:
        return float(expit(x + t).sum() - k)

    if k == n:
        # Pas de racine finie: σ(x_i + t) → 1 quand t → +∞, on s'arrête à la borne haute
        shift = high
    else:
        shift = bisect(constraint, low, high, xtol=xtol, maxiter=TOPK_MAX_ITER)
    z = x + shift
    v = expit(z) * expit(-z)
    residual = abs(constraint(shift))
    if residual > TOPK_RESIDUAL_TOL:
        logger.warning(f"⚠️ Top-k: résidu {residual:.2e} au-dessus de la tolérance "
                       f"{TOPK_RESIDUAL_TOL:.0e} (k={k}, n={n})")
    return TopKState(float(shift), v, residual)


def soft_topk(x: np.ndarray, k: int) -> np.ndarray:
    """Relaxation f_i = σ(x_i + t(x)), nulle sur les entrées masquées"""
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    state = solve_shift(x, k)
    out = np.zeros_like(x)
    out[finite] = expit(x[finite] + state.shift)
    return out


def topk_vjp(x: np.ndarray, k: int, upstream: np.ndarray) -> np.ndarray:
    """
    Produit vecteur-jacobienne de la relaxation: r ⊙ v − (⟨r, v⟩ / ||v||_1) · v

    Les entrées masquées (non finies) reçoivent un gradient nul.
    """
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    state = solve_shift(x, k)
    r = np.asarray(upstream, dtype=np.float64)[finite]
    v = state.v
    grad = np.zeros_like(x)
    grad[finite] = r * v - (np.dot(r, v) / v.sum()) * v
    return grad


def hard_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indicatrice des k plus grands scores finis (égalité → plus petit indice)"""
    scores = np.asarray(scores, dtype=np.float64)
    keyed = np.where(np.isfinite(scores), -scores, np.inf)
    chosen = np.argsort(keyed, kind='stable')[:k]
    selection = np.zeros_like(scores)
    selection[chosen] = 1.0
    return selection


def topk_select(logits: Union[Tensor, np.ndarray], k: int, temperature: float,
                rng: Optional[np.random.Generator], mode: str = 'train',
                mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Sélection dure de k entrées par ligne avec gradient droit-à-travers

    Args:
        logits: Logits non masqués (vecteur ou matrice m x P)
        k: Nombre d'entrées à sélectionner par ligne
        temperature: Échelle du bruit de Gumbel (mode 'train')
        rng: Générateur du bruit de Gumbel
        mode: 'train' (bruit de Gumbel) ou 'infer' (sans bruit)
        mask: Entrées masquées (True), exclues de la sélection et du gradient

    Returns:
        Tensor: Indicatrices de sélection, même forme que `logits`

    Raises:
        ConfigurationError: Moins de k entrées non masquées sur une ligne
    """
    if mode not in ('train', 'infer'):
        raise ConfigurationError(f"Mode de sélection inconnu '{mode}'")
    logits = dm.as_tensor(logits)
    flat = logits.value.reshape(1, -1) if logits.ndim == 1 else logits.value
    masked = np.zeros(flat.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(flat.shape)
    scores = np.where(masked, -np.inf, flat)

    selection = np.zeros_like(flat)
    for row in range(flat.shape[0]):
        finite = ~masked[row]
        if finite.sum() < k:
            raise ConfigurationError(f"Ligne {row}: {int(finite.sum())} entrée(s) disponible(s) pour k={k}")
        noisy = scores[row].copy()
        if mode == 'train' and temperature > 0:
            noisy[finite] += temperature * rng.gumbel(size=int(finite.sum()))
        selection[row] = hard_topk(noisy, k)

    def backward(g):
        g = g.reshape(flat.shape)
        grad = np.vstack([topk_vjp(scores[row], k, g[row]) for row in range(flat.shape[0])])
        return (grad.reshape(logits.shape),)

    return dm.custom_op("topk_select", selection.reshape(logits.shape), (logits,), backward)


def draw_mask(shape: Sequence[int], p_mask: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Masque booléen par ligne garantissant au moins k entrées libres"""
    if not 0.0 <= p_mask < 1.0:
        raise ConfigurationError(f"Probabilité de masquage {p_mask} hors de [0, 1)")
    shape = tuple(shape)
    rows = 1 if len(shape) == 1 else shape[0]
    width = shape[-1]
    if width < k:
        raise ConfigurationError(f"Pool de {width} candidats pour k={k}")
    masks = np.zeros((rows, width), dtype=bool)
    if p_mask == 0.0 or width == k:
        return masks.reshape(shape)
    for row in range(rows):
        for _ in range(_MAX_MASK_DRAWS):
            candidate = rng.random(width) < p_mask
            if width - candidate.sum() >= k:
                masks[row] = candidate
                break
        else:
            logger.warning(f"⚠️ Masque impossible à tirer après {_MAX_MASK_DRAWS} essais: ligne {row} non masquée")
    return masks.reshape(shape)


def random_mask(logits: np.ndarray, p_mask: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Remplace chaque entrée par −∞ avec probabilité p_mask (au moins k entrées conservées)"""
    logits = np.asarray(logits, dtype=np.float64)
    return np.where(draw_mask(logits.shape, p_mask, k, rng), -np.inf, logits)


# =====================================================
# SCORES DE CONNEXION ET DIVERSITÉ
# =====================================================

def attention_scores(queries: Tensor, keys: Tensor, heads: int, head_dim: int) -> Tensor:
    """l(i, j) = (1/H) Σ_m ⟨q_i^(m), k_j^(m)⟩ / √d_m avec q, k normalisés par tête"""
    if queries.shape[1] != heads * head_dim or keys.shape[1] != heads * head_dim:
        raise SchemaError(f"Largeur requête/clé incompatible avec {heads} têtes de {head_dim}")
    total = None
    for head in range(heads):
        lo, hi = head * head_dim, (head + 1) * head_dim
        q = dm.l2_normalize(dm.slice_cols(queries, lo, hi))
        k = dm.l2_normalize(dm.slice_cols(keys, lo, hi))
        scores = dm.matmul(q, dm.transpose(k))
        total = scores if total is None else dm.add(total, scores)
    return dm.scale(total, 1.0 / (heads * math.sqrt(head_dim)))


def diversity_loss(selections: Union[Mapping[str, Tensor], Sequence[Tensor]], margin: float) -> Tensor:
    """
    L_div = moyenne sur les types de (1/(B(B−1))) Σ_{i≠j} max(0, p̃_iᵀ p̃_j − τ), p̃ = p / ||p||_2

    Args:
        selections: Matrices de sélection (B x P) par type auxiliaire
        margin: Marge τ

    Returns:
        Tensor: Scalaire (0 avec avertissement si B < 2)
    """
    patterns = list(selections.values()) if isinstance(selections, Mapping) else list(selections)
    if not patterns or patterns[0].shape[0] < 2:
        logger.warning("⚠️ Perte de diversité ignorée: moins de deux triggers dans le lot")
        return dm.constant(np.asarray(0.0))

    total = None
    for pattern in patterns:
        b = pattern.shape[0]
        unit = dm.l2_normalize(pattern)
        cosine = dm.matmul(unit, dm.transpose(unit))
        hinge = dm.relu(dm.add(cosine, np.full((b, b), -margin)))
        off_diagonal = dm.mul(hinge, 1.0 - np.eye(b))
        term = dm.scale(dm.sum(off_diagonal), 1.0 / (b * (b - 1)))
        total = term if total is None else dm.add(total, term)
    return dm.scale(total, 1.0 / len(patterns))


def build_trigger_edges(selections: Mapping[str, np.ndarray], pool: CandidatePool, victim: int,
                        trigger_id: int, victim_relation: Relation, trigger_type: str) -> List[NewEdge]:
    """
    Arêtes d'un déclencheur injecté: un lien victime puis K_{t_a} liens auxiliaires par type

    Raises:
        InvariantError: Si une sélection n'a pas exactement K_{t_a} entrées
    """
    edges = [NewEdge(int(trigger_id), int(victim), victim_relation)]
    for aux_type, selection in selections.items():
        aux = pool[aux_type]
        chosen = np.flatnonzero(np.asarray(selection) > 0.5)
        if chosen.size != aux.budget:
            raise InvariantError(f"{aux_type}: {chosen.size} sélection(s) au lieu de K={aux.budget}")
        relation = Relation(trigger_type, aux_type)
        edges.extend(NewEdge(int(trigger_id), int(aux.members[j]), relation) for j in chosen)
    return edges


# =====================================================
# LOT DE TRIGGERS
# =====================================================

@dataclass
class TriggerStreams:
    """Sous-flux aléatoires du générateur"""
    noise: np.random.Generator
    mask: np.random.Generator
    gumbel: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "TriggerStreams":
        noise, mask, gumbel = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(noise, mask, gumbel)


@dataclass
class TriggerBatch:
    """Triggers générés pour un lot de victimes (une ligne par nœud injecté)"""
    trigger_type: str
    victims: np.ndarray
    features: Tensor
    raw_features: Tensor
    selections: Dict[str, Tensor]
    members: Dict[str, np.ndarray]
    budgets: Dict[str, int]
    victim_relation: Relation
    logits: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.victims.size)

    def selection_arrays(self) -> Dict[str, np.ndarray]:
        return {t: s.numpy() for t, s in self.selections.items()}

    def soft_rows(self, start: int) -> SoftTriggerRows:
        rows = {Relation(self.trigger_type, t): (self.members[t], self.selections[t], self.budgets[t])
                for t in self.selections}
        return SoftTriggerRows(start, rows)

    def trigger_features(self, graph: HeteroGraph, features: Optional[Tensor] = None) -> Tensor:
        """Matrice complète des features déclencheurs du graphe empoisonné (propres puis injectées)"""
        injected = self.features if features is None else features
        return dm.concat([dm.constant(graph.features(self.trigger_type)), injected], axis=0)

    def to_delta(self, graph: HeteroGraph, pool: CandidatePool,
                 features: Optional[np.ndarray] = None) -> GraphDelta:
        base = graph.num_nodes(self.trigger_type)
        selections = self.selection_arrays()
        edges: List[NewEdge] = []
        for i, victim in enumerate(self.victims):
            edges.extend(build_trigger_edges({t: s[i] for t, s in selections.items()}, pool, victim,
                                             base + i, self.victim_relation, self.trigger_type))
        values = self.features.numpy() if features is None else np.asarray(features, dtype=np.float64)
        return GraphDelta(self.trigger_type, base, values, tuple(edges),
                          {base + i: int(v) for i, v in enumerate(self.victims)})


# =====================================================
# GÉNÉRATEUR
# =====================================================

def _mlp(x: Tensor, p: Mapping[str, Tensor], prefix: str, hidden_layers: int) -> Tensor:
    for layer in range(hidden_layers):
        x = dm.add(dm.matmul(x, p[f"{prefix}.{layer}.W"]), p[f"{prefix}.{layer}.b"])
        x = dm.gelu(dm.layer_norm(x))
    return dm.add(dm.matmul(x, p[f"{prefix}.out.W"]), p[f"{prefix}.out.b"])


class TrojanGenerator:
    """Générateur de triggers conditionné par la victime (paramètres θ_g)"""

    FEATURE_LAYERS = 2
    SCORER_LAYERS = 1

    def __init__(self, primary_dim: int, trigger_dim: int, aux_dims: Mapping[str, int],
                 config: Optional[TrojanConfig] = None, use_adain: bool = True,
                 rng: Optional[np.random.Generator] = None, params: Optional[ParameterSet] = None):
        self.primary_dim = int(primary_dim)
        self.trigger_dim = int(trigger_dim)
        self.aux_dims = dict(aux_dims)
        self.config = config or TrojanConfig()
        self.use_adain = use_adain
        self.params = params if params is not None else self._init_params(rng or np.random.default_rng(0))

    @classmethod
    def for_graph(cls, graph: HeteroGraph, roles: SchemaRoles, **kwargs) -> "TrojanGenerator":
        return cls(graph.feature_dim(roles.primary_type), graph.feature_dim(roles.trigger_type),
                   {t: graph.feature_dim(t) for t in roles.auxiliary_types}, **kwargs)

    def _add_mlp(self, params: ParameterSet, rng: np.random.Generator, prefix: str,
                 widths: Sequence[int]) -> None:
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-2], widths[1:-1])):
            params.add(f"{prefix}.{layer}.W", glorot_uniform(rng, fan_in, fan_out))
            params.add(f"{prefix}.{layer}.b", np.zeros(fan_out))
        params.add(f"{prefix}.out.W", glorot_uniform(rng, widths[-2], widths[-1]))
        params.add(f"{prefix}.out.b", np.zeros(widths[-1]))

    def _init_params(self, rng: np.random.Generator) -> ParameterSet:
        cfg = self.config
        width = cfg.heads * cfg.head_dim
        params = ParameterSet()
        self._add_mlp(params, rng, "feat",
                      [self.primary_dim] + [cfg.hidden_dim] * self.FEATURE_LAYERS + [self.trigger_dim])
        condition = self.primary_dim + self.trigger_dim + cfg.noise_dim
        self._add_mlp(params, rng, "query", [condition] + [cfg.hidden_dim] * self.SCORER_LAYERS + [width])
        for aux_type in sorted(self.aux_dims):
            dim = self.aux_dims[aux_type]
            self._add_mlp(params, rng, f"key.{aux_type}", [dim] + [cfg.hidden_dim] * self.SCORER_LAYERS + [width])
        return params

    def gen_features(self, x_victim: Union[Tensor, np.ndarray],
                     params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """x^(new) = g_θ(x_victim), lignes indépendantes"""
        x = dm.as_tensor(x_victim)
        if x.ndim == 1:
            x = dm.constant(x.value.reshape(1, -1))
        if x.shape[1] != self.primary_dim:
            raise SchemaError(f"Largeur victime {x.shape[1]} au lieu de {self.primary_dim}")
        return _mlp(x, params if params is not None else self.params, "feat", self.FEATURE_LAYERS)

    def connection_logits(self, condition: Tensor, pool_features: Union[Tensor, np.ndarray], aux_type: str,
                          params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """Logits de connexion (m x P) entre conditions h et candidats d'un type auxiliaire"""
        pool_features = dm.as_tensor(pool_features)
        if pool_features.shape[0] == 0:
            raise ConfigurationError(f"Pool vide pour le type {aux_type}")
        p = params if params is not None else self.params
        queries = _mlp(condition, p, "query", self.SCORER_LAYERS)
        keys = _mlp(pool_features, p, f"key.{aux_type}", self.SCORER_LAYERS)
        return attention_scores(queries, keys, self.config.heads, self.config.head_dim)

    def generate(self, victims: Sequence[int], graph: HeteroGraph, roles: SchemaRoles, pool: CandidatePool,
                 stats: Optional[AdaINStats], streams: TriggerStreams, mode: str = 'train',
                 params: Optional[Mapping[str, Tensor]] = None) -> TriggerBatch:
        """
        Génère `triggers_per_victim` nœuds déclencheurs pour chaque victime

        Args:
            victims: Nœuds principaux à attaquer
            graph: Graphe propre
            roles: Rôles du schéma
            pool: Pools de candidats filtrés
            stats: Statistiques AdaIN (ignorées si use_adain est faux)
            streams: Sous-flux de bruit, masque et Gumbel
            mode: 'train' (masque + Gumbel) ou 'infer'

        Returns:
            TriggerBatch: Features et sélections différentiables
        """
        cfg = self.config
        p = params if params is not None else self.params
        victims = np.repeat(np.asarray(victims, dtype=np.int64), cfg.triggers_per_victim)
        if victims.size == 0:
            raise ConfigurationError("Aucune victime à équiper de triggers")

        x_victim = dm.constant(graph.features(roles.primary_type)[victims])
        raw = self.gen_features(x_victim, p)
        if self.use_adain:
            if stats is None:
                raise ConfigurationError("Statistiques AdaIN requises")
            features = adain(raw, stats)
        else:
            features = raw

        noise = streams.noise.standard_normal((victims.size, cfg.noise_dim))
        condition = dm.concat([x_victim, raw, dm.constant(noise)], axis=1)

        selections, logits_by_type, members, budgets = {}, {}, {}, {}
        for aux_type in roles.auxiliary_types:
            aux = pool[aux_type]
            logits = self.connection_logits(condition, graph.features(aux_type)[aux.members], aux_type, p)
            mask = draw_mask(logits.shape, cfg.mask_prob, aux.budget, streams.mask) if mode == 'train' else None
            selections[aux_type] = topk_select(logits, aux.budget, cfg.temperature, streams.gumbel, mode, mask)
            logits_by_type[aux_type] = logits.numpy()
            members[aux_type] = aux.members
            budgets[aux_type] = aux.budget

        victim_relation, _ = graph.link(roles.primary_type, roles.trigger_type)
        return TriggerBatch(roles.trigger_type, victims, features, raw, selections, members, budgets,
                            victim_relation, logits_by_type)

    # --- persistance ---

    def to_payload(self, seed: Optional[int] = None, lambda_div: Optional[float] = None) -> Dict[str, Any]:
        hyper = self.config.model_dump()
        hyper['lambda_div'] = lambda_div
        return {
            'format_version': CHECKPOINT_FORMAT_VERSION,
            'kind': 'trojan_generator',
            'seed': seed,
            'architecture': {'primary_dim': self.primary_dim, 'trigger_dim': self.trigger_dim,
                             'aux_dims': self.aux_dims, 'use_adain': self.use_adain},
            'hyperparameters': hyper,
            'params': self.params.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "TrojanGenerator":
        if payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(f"Version de checkpoint non supportée: {payload.get('format_version')}")
        arch = payload['architecture']
        hyper = {k: v for k, v in payload['hyperparameters'].items() if k != 'lambda_div'}
        return cls(arch['primary_dim'], arch['trigger_dim'], arch['aux_dims'], TrojanConfig(**hyper),
                   arch['use_adain'], params=ParameterSet.from_payload(payload['params']))
