"""
Pools de candidats auxiliaires: collecte à 2 sauts, budget de degré P90 et filtrage par saillance
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional

import numpy as np

from config.settings import DEGREE_QUANTILE, POOL_FOLD
from src.exceptions import ConfigurationError
from src.heterograph import HeteroGraph, SchemaRoles, two_hop_matrix
from src.surrogate import RelationalClassifier, input_gradients

logger = logging.getLogger(__name__)

POOL_STRATEGIES = ('saliency', 'random')


@dataclass
class AuxPool:
    """Pool d'un type auxiliaire: brut, filtré (trié par score décroissant), budget et taille"""
    aux_type: str
    raw: np.ndarray
    members: np.ndarray
    scores: np.ndarray
    budget: int
    pool_size: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'budget': self.budget,
            'pool_size': self.pool_size,
            'raw': self.raw.tolist(),
            'members': [{'id': int(i), 'score': float(s)} for i, s in zip(self.members, self.scores)],
        }

    @classmethod
    def from_dict(cls, aux_type: str, data: Mapping[str, Any]) -> "AuxPool":
        members = data['members']
        return cls(aux_type, np.asarray(data['raw'], dtype=np.int64),
                   np.asarray([m['id'] for m in members], dtype=np.int64),
                   np.asarray([m['score'] for m in members], dtype=np.float64),
                   int(data['budget']), int(data['pool_size']))


@dataclass
class CandidatePool:
    """Pools filtrés C*_{t_a} par type auxiliaire"""
    fold: int
    strategy: str
    pools: Dict[str, AuxPool] = field(default_factory=dict)

    @property
    def budgets(self) -> Dict[str, int]:
        return {t: p.budget for t, p in self.pools.items()}

    @property
    def allowed(self) -> Dict[str, np.ndarray]:
        return {t: p.members for t, p in self.pools.items()}

    def __getitem__(self, aux_type: str) -> AuxPool:
        return self.pools[aux_type]

    def to_dict(self) -> Dict[str, Any]:
        return {'fold': self.fold, 'strategy': self.strategy,
                'types': {t: p.to_dict() for t, p in self.pools.items()}}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CandidatePool":
        return cls(int(data['fold']), data['strategy'],
                   {t: AuxPool.from_dict(t, entry) for t, entry in data['types'].items()})


def raw_pool(graph: HeteroGraph, roles: SchemaRoles) -> Dict[str, np.ndarray]:
    """
    Union des voisins auxiliaires à 2 sauts de tous les nœuds de la classe cible

    Raises:
        ConfigurationError: Si la classe cible ne contient aucun nœud
    """
    targets = roles.target_nodes
    if targets.size == 0:
        raise ConfigurationError(f"Aucun nœud de la classe cible {roles.target_class}")
    pools = {}
    for aux_type in roles.auxiliary_types:
        paths = two_hop_matrix(graph, roles, aux_type)[targets]
        pools[aux_type] = np.unique(paths.indices).astype(np.int64)
    return pools


def degree_budget(graph: HeteroGraph, roles: SchemaRoles, aux_type: str, q: float = DEGREE_QUANTILE) -> int:
    """
    K_{t_a}: quantile au rang le plus proche (rang = ceil(q·m), base 1) des degrés déclencheur → auxiliaire

    Raises:
        ConfigurationError: Si aucun nœud déclencheur n'existe
    """
    if not 0.0 < q <= 1.0:
        raise ConfigurationError(f"Quantile {q} hors de ]0, 1]")
    degrees = np.sort(graph.degrees((roles.trigger_type, aux_type)))
    if degrees.size == 0:
        raise ConfigurationError(f"Aucun nœud de type {roles.trigger_type}: budget indéfini")
    rank = max(1, math.ceil(round(q * degrees.size, 9)))
    return int(math.ceil(degrees[rank - 1]))


def saliency_scores(surrogate: RelationalClassifier, graph: HeteroGraph, roles: SchemaRoles,
                    candidates: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    S(v) = Σ_{v_p} ||∂ logit(v_p, y_t) / ∂ x_v||_1 sur les nœuds cibles correctement prédits

    Args:
        candidates: Identifiants candidats par type auxiliaire

    Returns:
        Dict[str, np.ndarray]: Scores alignés sur `candidates`
    """
    targets = roles.target_nodes
    predictions = surrogate.predict(graph)
    used = targets[predictions[targets] == roles.target_class]
    if used.size == 0:
        logger.warning(f"⚠️ Aucun nœud cible correctement prédit: saillance calculée sur les {targets.size} nœuds cibles")
        used = targets

    scores = {t: np.zeros(len(ids)) for t, ids in candidates.items()}
    for _, grads in input_gradients(surrogate, graph, used, roles.target_class):
        for aux_type, ids in candidates.items():
            if len(ids):
                scores[aux_type] += np.abs(grads[aux_type][ids]).sum(axis=1)
    return scores


def build_pool(graph: HeteroGraph, roles: SchemaRoles, surrogate: Optional[RelationalClassifier],
               fold: int = POOL_FOLD, strategy: str = 'saliency', quantile: float = DEGREE_QUANTILE,
               rng: Optional[np.random.Generator] = None) -> CandidatePool:
    """
    Construit C*_{t_a} pour chaque type auxiliaire

    Args:
        graph: Graphe propre
        roles: Rôles du schéma
        surrogate: Substitut entraîné (requis pour la stratégie 'saliency')
        fold: Facteur n (K_pool = n·K)
        strategy: 'saliency' (top-K_pool par score) ou 'random' (sous-ensemble uniforme, ablation)
        rng: Générateur pour la stratégie 'random'

    Returns:
        CandidatePool: Pools filtrés

    Raises:
        ConfigurationError: Budget nul ou pool brut plus petit que le budget pour un type auxiliaire
    """
    if fold < 1:
        raise ConfigurationError(f"Facteur de pool {fold} < 1")
    if strategy not in POOL_STRATEGIES:
        raise ConfigurationError(f"Stratégie de pool inconnue '{strategy}'")
    if strategy == 'saliency' and surrogate is None:
        raise ConfigurationError("La stratégie 'saliency' requiert un substitut entraîné")

    logger.info(f"🔄 Construction des pools de candidats (n={fold}, stratégie={strategy})")
    raw = raw_pool(graph, roles)
    scores = saliency_scores(surrogate, graph, roles, raw) if strategy == 'saliency' else None

    pool = CandidatePool(fold, strategy)
    for aux_type, ids in raw.items():
        budget = degree_budget(graph, roles, aux_type, quantile)
        if budget < 1:
            raise ConfigurationError(
                f"Type auxiliaire {aux_type}: budget K=0 (trop peu d'arêtes {roles.trigger_type} → {aux_type})")
        if ids.size < budget:
            raise ConfigurationError(
                f"Type auxiliaire {aux_type}: {ids.size} candidats à 2 sauts pour un budget K={budget}")
        size = fold * budget
        keep = min(size, ids.size)
        if strategy == 'saliency':
            order = np.lexsort((ids, -scores[aux_type]))[:keep]
            members, member_scores = ids[order], scores[aux_type][order]
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            members = np.sort(rng.choice(ids, size=keep, replace=False)) if keep else ids[:0]
            member_scores = np.zeros(keep)
        pool.pools[aux_type] = AuxPool(aux_type, ids, members.astype(np.int64), member_scores, budget, size)
        logger.info(f"✅ {aux_type}: |C|={ids.size}, K={budget}, K_pool={size}, retenus={keep}")
    return pool
