"""
Jeu de données synthétique, découpage, sélection des victimes et attaque naïve de référence
"""
import logging
import math
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from config.settings import NAIVE_OFFSET_STD, SPLIT_FRACTIONS
from src.candidates import CandidatePool
from src.exceptions import ConfigurationError
from src.heterograph import AttackTargets, GraphDelta, HeteroGraph, NewEdge, Relation, SchemaRoles, Split
from src.schemas import DatasetSpec

logger = logging.getLogger(__name__)

DECILE = 0.1


# =====================================================
# DEGRÉS À QUEUE LONGUE
# =====================================================

def pareto_scale(target_p90: float, shape: float) -> float:
    """x_min tel que le P90 de la loi de Pareto continue vaille target_p90 − 0.5"""
    return (target_p90 - 0.5) * DECILE ** (1.0 / shape)


def sample_degrees(count: int, target_p90: int, shape: float, rng: np.random.Generator,
                   max_degree: Optional[int] = None) -> np.ndarray:
    """
    Degrés issus d'une loi de Pareto discrétisée (plafond), bornés à [1, max_degree]

    Raises:
        ConfigurationError: Si le P90 visé dépasse le degré maximal réalisable
    """
    if max_degree is not None and target_p90 > max_degree:
        raise ConfigurationError(f"P90 visé {target_p90} supérieur au degré réalisable {max_degree}")
    x_min = pareto_scale(target_p90, shape)
    continuous = x_min * (1.0 - rng.random(count)) ** (-1.0 / shape)
    degrees = np.maximum(np.ceil(continuous), 1).astype(np.int64)
    if max_degree is not None:
        degrees = np.minimum(degrees, max_degree)
    return degrees


def _wire(src_count: int, dst_count: int, src_groups: np.ndarray, dst_groups: np.ndarray,
          degrees: np.ndarray, homophily: float, rng: np.random.Generator, self_loops: bool) -> np.ndarray:
    """Tire, pour chaque source, `degree` destinations distinctes (même communauté avec probabilité homophily)"""
    rows = []
    for u in range(src_count):
        same = dst_groups == src_groups[u]
        weights = np.where(same, homophily / max(same.sum(), 1), (1.0 - homophily) / max((~same).sum(), 1))
        if not self_loops:
            weights[u] = 0.0
        available = int(np.count_nonzero(weights))
        if available == 0:
            continue
        weights = weights / weights.sum()
        chosen = rng.choice(dst_count, size=min(int(degrees[u]), available), replace=False, p=weights)
        rows.extend((u, int(v)) for v in chosen)
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def _centers(rng: np.random.Generator, groups: int, dim: int, signal: float) -> np.ndarray:
    directions = rng.standard_normal((groups, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * signal / math.sqrt(2.0)


def generate_synthetic(spec: Optional[DatasetSpec] = None, seed: int = 0,
                       target_class: int = 0) -> Tuple[HeteroGraph, SchemaRoles]:
    """
    Génère un graphe hétérogène à communautés et degrés à queue longue

    Les nœuds principaux portent une étiquette; leurs features suivent une gaussienne centrée sur
    le centre de leur classe. Les autres types reçoivent une communauté latente, un décalage de
    rôle par type et un centre de communauté plus faible. Chaque relation est câblée avec des
    degrés sortants de Pareto et une homophilie entre communautés.

    Args:
        spec: Schéma et paramètres (défauts de config/settings.py)
        seed: Graine du sous-flux 'data'
        target_class: Classe cible des rôles retournés

    Returns:
        Tuple[HeteroGraph, SchemaRoles]: Graphe et rôles

    Raises:
        ConfigurationError: Spécification de degré irréalisable
    """
    spec = spec or DatasetSpec()
    rng = np.random.default_rng(seed)
    classes = spec.num_classes
    logger.info(f"🔄 Génération synthétique ({len(spec.node_types)} types, {len(spec.relations)} relations, graine {seed})")

    for src, dst in spec.relations:
        limit = spec.node_types[dst].count - (1 if src == dst else 0)
        if spec.aux_degree_p90 > limit:
            raise ConfigurationError(f"Relation {src}->{dst}: P90 {spec.aux_degree_p90} > {limit} destinations")

    groups: Dict[str, np.ndarray] = {}
    features: Dict[str, np.ndarray] = {}
    for node_type, entry in spec.node_types.items():
        if node_type == spec.primary_type:
            labels = rng.permutation(np.arange(entry.count) % classes)
            groups[node_type] = labels
            centers = _centers(rng, classes, entry.feature_dim, spec.class_signal)
            offset = np.zeros(entry.feature_dim)
        else:
            groups[node_type] = rng.integers(0, classes, size=entry.count)
            centers = _centers(rng, classes, entry.feature_dim, spec.class_signal / 2.0)
            offset = rng.standard_normal(entry.feature_dim)
        noise = rng.standard_normal((entry.count, entry.feature_dim))
        features[node_type] = offset + centers[groups[node_type]] + noise

    edges: Dict[Relation, np.ndarray] = {}
    for src, dst in spec.relations:
        n_src, n_dst = spec.node_types[src].count, spec.node_types[dst].count
        limit = n_dst - (1 if src == dst else 0)
        degrees = sample_degrees(n_src, spec.aux_degree_p90, spec.pareto_shape, rng, limit)
        edges[Relation(src, dst)] = _wire(n_src, n_dst, groups[src], groups[dst], degrees,
                                          spec.homophily, rng, self_loops=src != dst)

    counts = {t: e.count for t, e in spec.node_types.items()}
    graph = HeteroGraph(counts, features, edges)
    roles = SchemaRoles.derive(graph, spec.primary_type, spec.trigger_type, groups[spec.primary_type],
                               target_class, classes)
    logger.info(f"✅ Graphe généré: {graph.summary()['relations']}")
    return graph, roles


# =====================================================
# DÉCOUPAGE ET VICTIMES
# =====================================================

def make_split(n: int, fractions: Sequence[float] = SPLIT_FRACTIONS,
               rng: Optional[np.random.Generator] = None) -> Split:
    """
    Découpage disjoint train / test / validation couvrant les n nœuds principaux

    Raises:
        ConfigurationError: Une des parts serait vide
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    train_f, test_f, _ = fractions
    n_train = int(math.floor(round(train_f * n, 9)))
    n_test = int(math.floor(round(test_f * n, 9)))
    if n_train == 0 or n_test == 0 or n - n_train - n_test <= 0:
        raise ConfigurationError(f"Découpage {tuple(fractions)} impossible pour {n} nœuds")
    order = rng.permutation(n)
    return Split(np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_test]),
                 np.sort(order[n_train + n_test:]))


def poison_count(n: int, fraction: float) -> int:
    """⌊fraction · n⌋, au moins 1"""
    return max(1, int(math.floor(round(fraction * n, 9))))


def select_victims(part: np.ndarray, labels: np.ndarray, target_class: int, count: int,
                   rng: np.random.Generator) -> np.ndarray:
    """
    Tire `count` victimes uniformément parmi les nœuds non-cible de `part`

    Raises:
        ConfigurationError: Pas assez de nœuds non-cible
    """
    eligible = np.asarray(part, dtype=np.int64)
    eligible = eligible[np.asarray(labels)[eligible] != target_class]
    if eligible.size < count:
        raise ConfigurationError(f"{count} victimes demandées pour {eligible.size} nœuds non-cible")
    return np.sort(rng.choice(eligible, size=count, replace=False)).astype(np.int64)


def build_targets(split: Split, roles: SchemaRoles, poison_fraction: float,
                  rng: np.random.Generator) -> AttackTargets:
    """Victimes empoisonnées train et test (fraction du nombre total de nœuds principaux)"""
    count = poison_count(roles.labels.size, poison_fraction)
    poisoned_train = select_victims(split.train, roles.labels, roles.target_class, count, rng)
    poisoned_test = select_victims(split.test, roles.labels, roles.target_class, count, rng)
    return AttackTargets(poisoned_train, poisoned_test, roles.target_nodes, roles.non_target_nodes, split)


# =====================================================
# ATTAQUE NAÏVE
# =====================================================

def naive_feature(graph: HeteroGraph, trigger_type: str, offset_std: float = NAIVE_OFFSET_STD) -> np.ndarray:
    """Vecteur commun μ + offset·σ (statistiques de population du type déclencheur)"""
    clean = graph.features(trigger_type)
    return clean.mean(axis=0) + offset_std * clean.std(axis=0)


def naive_inject(graph: HeteroGraph, roles: SchemaRoles, victims: Sequence[int],
                 budgets: Mapping[str, int], pool: Optional[CandidatePool] = None,
                 rng: Optional[np.random.Generator] = None,
                 offset_std: float = NAIVE_OFFSET_STD, feature: Optional[np.ndarray] = None) -> GraphDelta:
    """
    Injecte un déclencheur par victime, tous avec la même feature éloignée de la population

    Chaque déclencheur est lié à sa victime et à K_{t_a} nœuds tirés au hasard (dans le pool
    de candidats s'il est fourni, sinon parmi tous les nœuds du type auxiliaire).
    `feature` remplace la feature calculée sur `graph` (même déclencheur pour deux injections successives).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    victims = np.asarray(victims, dtype=np.int64)
    t_tr = roles.trigger_type
    base = graph.num_nodes(t_tr)
    victim_relation, _ = graph.link(roles.primary_type, t_tr)
    edges = []
    for i, victim in enumerate(victims):
        trigger = base + i
        edges.append(NewEdge(trigger, int(victim), victim_relation))
        for aux_type, budget in budgets.items():
            candidates = pool[aux_type].members if pool is not None else np.arange(graph.num_nodes(aux_type))
            chosen = rng.choice(candidates, size=min(budget, candidates.size), replace=False)
            edges.extend(NewEdge(trigger, int(u), Relation(t_tr, aux_type)) for u in np.sort(chosen))
    if feature is None:
        feature = naive_feature(graph, t_tr, offset_std)
    features = np.tile(np.asarray(feature, dtype=np.float64), (victims.size, 1))
    logger.info(f"✅ Attaque naïve: {victims.size} déclencheurs injectés")
    return GraphDelta(t_tr, base, features, tuple(edges), {base + i: int(v) for i, v in enumerate(victims)})
