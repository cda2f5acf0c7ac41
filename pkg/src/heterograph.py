"""
Modèle de données du graphe hétérogène: types de nœuds, relations typées, rôles et deltas d'empoisonnement
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import scipy.sparse as sp

from config.settings import MAX_REPORTED_VIOLATIONS
from src.exceptions import ConfigurationError, DeltaValidationError, GraphValidationError, SchemaError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Relation:
    """Relation orientée r_{src,dst}"""
    src: str
    dst: str

    @property
    def name(self) -> str:
        return f"{self.src}->{self.dst}"

    def __str__(self) -> str:
        return self.name


RelationLike = Union[Relation, Tuple[str, str]]


def as_relation(relation: RelationLike) -> Relation:
    return relation if isinstance(relation, Relation) else Relation(*relation)


def _canonical_edges(edges: Any) -> np.ndarray:
    array = np.asarray(edges, dtype=np.int64)
    if array.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if array.ndim != 2 or array.shape[1] != 2:
        raise SchemaError(f"Liste d'arêtes mal formée: forme {array.shape}")
    order = np.lexsort((array[:, 1], array[:, 0]))
    return array[order]


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class HeteroGraph:
    """
    Graphe hétérogène immuable

    Les identifiants sont denses par type (0..n_t-1). Chaque relation orientée stocke ses arêtes
    triées (src, dst) et une matrice d'incidence 0/1; la transposée est maintenue pour le
    parcours inverse.
    """

    def __init__(self, node_counts: Mapping[str, int], features: Mapping[str, Any],
                 edges: Mapping[RelationLike, Any]):
        self._counts: Dict[str, int] = {t: int(n) for t, n in node_counts.items()}
        self._features: Dict[str, np.ndarray] = {}
        self._edges: Dict[Relation, np.ndarray] = {}
        violations: List[str] = []

        for node_type, count in self._counts.items():
            if count < 0:
                violations.append(f"type {node_type}: effectif négatif {count}")
            if node_type not in features:
                violations.append(f"type {node_type}: matrice de features absente")
                continue
            matrix = np.array(features[node_type], dtype=np.float64)
            if matrix.ndim == 1 and count == 0:
                matrix = matrix.reshape(0, 0)
            if matrix.ndim != 2:
                violations.append(f"type {node_type}: features non matricielles {matrix.shape}")
                continue
            if matrix.shape[0] != count:
                violations.append(f"type {node_type}: {matrix.shape[0]} lignes de features pour {count} nœuds")
            if not np.all(np.isfinite(matrix)):
                violations.append(f"type {node_type}: features non finies")
            self._features[node_type] = _freeze(matrix)

        for extra in set(features) - set(self._counts):
            violations.append(f"features pour un type inconnu {extra}")

        for relation_like, edge_list in edges.items():
            relation = as_relation(relation_like)
            if relation in self._edges:
                violations.append(f"relation {relation} déclarée deux fois")
                continue
            unknown = [t for t in (relation.src, relation.dst) if t not in self._counts]
            if unknown:
                violations.append(f"relation {relation}: type inconnu {unknown}")
                continue
            try:
                array = _canonical_edges(edge_list)
            except SchemaError as e:
                violations.append(f"relation {relation}: {e}")
                continue
            violations.extend(self._edge_violations(relation, array))
            self._edges[relation] = _freeze(array)

        if len(self._counts) + len(self._edges) <= 2:
            violations.append(
                f"condition d'hétérogénéité non respectée: |T|={len(self._counts)}, |R|={len(self._edges)}"
            )

        if violations:
            raise GraphValidationError(violations[:MAX_REPORTED_VIOLATIONS])

        self._adjacency: Dict[Relation, sp.csr_matrix] = {}
        self._transpose: Dict[Relation, sp.csr_matrix] = {}
        self._mean_ops: Dict[Tuple[Relation, bool], sp.csr_matrix] = {}
        for relation, array in self._edges.items():
            shape = (self._counts[relation.src], self._counts[relation.dst])
            matrix = sp.csr_matrix((np.ones(len(array)), (array[:, 0], array[:, 1])), shape=shape)
            self._adjacency[relation] = matrix
            self._transpose[relation] = matrix.T.tocsr()

    def _edge_violations(self, relation: Relation, array: np.ndarray) -> List[str]:
        found = []
        n_src, n_dst = self._counts[relation.src], self._counts[relation.dst]
        bad = (array[:, 0] < 0) | (array[:, 0] >= n_src) | (array[:, 1] < 0) | (array[:, 1] >= n_dst)
        for i, j in array[bad][:MAX_REPORTED_VIOLATIONS]:
            found.append(f"relation {relation}: extrémité hors bornes ({i}, {j})")
        if len(array) > 1:
            dup = np.all(array[1:] == array[:-1], axis=1)
            for i, j in array[1:][dup][:MAX_REPORTED_VIOLATIONS]:
                found.append(f"relation {relation}: arête dupliquée ({i}, {j})")
        return found

    # --- schéma ---

    @property
    def node_types(self) -> Tuple[str, ...]:
        return tuple(self._counts)

    @property
    def relations(self) -> Tuple[Relation, ...]:
        return tuple(self._edges)

    @property
    def node_counts(self) -> Dict[str, int]:
        return dict(self._counts)

    def num_nodes(self, node_type: str) -> int:
        self._check_type(node_type)
        return self._counts[node_type]

    def feature_dim(self, node_type: str) -> int:
        return self.features(node_type).shape[1]

    def features(self, node_type: str) -> np.ndarray:
        self._check_type(node_type)
        return self._features[node_type]

    def has_relation(self, relation: RelationLike) -> bool:
        return as_relation(relation) in self._edges

    def relation(self, relation: RelationLike) -> Relation:
        relation = as_relation(relation)
        if relation not in self._edges:
            raise SchemaError(f"Relation inconnue: {relation}")
        return relation

    def _check_type(self, node_type: str) -> None:
        if node_type not in self._counts:
            raise SchemaError(f"Type de nœud inconnu: {node_type}")

    def _check_node(self, node_type: str, node: int) -> None:
        if not 0 <= int(node) < self._counts[node_type]:
            raise SchemaError(f"Nœud {node} hors bornes pour le type {node_type} ({self._counts[node_type]} nœuds)")

    # --- structure ---

    def edges(self, relation: RelationLike) -> np.ndarray:
        return self._edges[self.relation(relation)]

    def edge_count(self, relation: Optional[RelationLike] = None) -> int:
        if relation is None:
            return int(sum(len(e) for e in self._edges.values()))
        return len(self.edges(relation))

    def adjacency(self, relation: RelationLike, reverse: bool = False) -> sp.csr_matrix:
        relation = self.relation(relation)
        return self._transpose[relation] if reverse else self._adjacency[relation]

    def mean_operator(self, relation: RelationLike, reverse: bool = False) -> sp.csr_matrix:
        """Opérateur de moyenne D^-1 A (lignes nulles pour les nœuds isolés), mis en cache"""
        relation = self.relation(relation)
        key = (relation, reverse)
        if key not in self._mean_ops:
            matrix = self.adjacency(relation, reverse)
            degree = np.asarray(matrix.sum(axis=1)).ravel()
            inverse = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
            self._mean_ops[key] = (sp.diags(inverse) @ matrix).tocsr()
        return self._mean_ops[key]

    def degree(self, relation: RelationLike, node: int, reverse: bool = False) -> int:
        relation = self.relation(relation)
        self._check_node(relation.dst if reverse else relation.src, node)
        matrix = self.adjacency(relation, reverse)
        return int(matrix.indptr[node + 1] - matrix.indptr[node])

    def degrees(self, relation: RelationLike, reverse: bool = False) -> np.ndarray:
        return np.diff(self.adjacency(relation, reverse).indptr).astype(np.int64)

    def neighbors(self, relation: RelationLike, node: int, reverse: bool = False) -> np.ndarray:
        relation = self.relation(relation)
        self._check_node(relation.dst if reverse else relation.src, node)
        matrix = self.adjacency(relation, reverse)
        return np.sort(matrix.indices[matrix.indptr[node]:matrix.indptr[node + 1]]).astype(np.int64)

    def link(self, from_type: str, to_type: str) -> Tuple[Relation, bool]:
        """Relation (et sens) permettant d'aller de `from_type` vers `to_type`"""
        if (from_type, to_type) in {(r.src, r.dst) for r in self._edges}:
            return Relation(from_type, to_type), False
        if (to_type, from_type) in {(r.src, r.dst) for r in self._edges}:
            return Relation(to_type, from_type), True
        raise SchemaError(f"Aucune relation entre {from_type} et {to_type}")

    def auxiliary_types(self, trigger_type: str, primary_type: Optional[str] = None) -> Tuple[str, ...]:
        """
        Types atteints depuis le type déclencheur par une relation sortante (type principal exclu)

        Les arêtes injectées sont créées comme Relation(déclencheur, auxiliaire): un type relié
        seulement par une relation entrante (auxiliaire → déclencheur) n'est pas auxiliaire.
        """
        found = []
        for relation in self._edges:
            if relation.src == trigger_type and relation.dst not in (primary_type, trigger_type) \
                    and relation.dst not in found:
                found.append(relation.dst)
        return tuple(found)

    # --- transformations (produisent un nouveau graphe) ---

    def with_edges(self, edges: Mapping[Relation, np.ndarray]) -> "HeteroGraph":
        merged = dict(self._edges)
        merged.update({as_relation(r): e for r, e in edges.items()})
        return HeteroGraph(self._counts, self._features, merged)

    def without_edges(self, drop: Mapping[RelationLike, np.ndarray]) -> "HeteroGraph":
        """Retire, par relation, les arêtes marquées par un masque booléen aligné sur `edges(relation)`"""
        kept = {}
        for relation, array in self._edges.items():
            mask = drop.get(relation)
            if mask is None:
                mask = drop.get((relation.src, relation.dst))
            kept[relation] = array if mask is None else array[~np.asarray(mask, dtype=bool)]
        return HeteroGraph(self._counts, self._features, kept)

    def isolate_nodes(self, node_type: str, nodes: Iterable[int]) -> "HeteroGraph":
        """Retire toutes les arêtes incidentes aux nœuds donnés (les identifiants restent denses)"""
        self._check_type(node_type)
        nodes = np.asarray(sorted(set(int(n) for n in nodes)), dtype=np.int64)
        drop = {}
        for relation, array in self._edges.items():
            mask = np.zeros(len(array), dtype=bool)
            if relation.src == node_type:
                mask |= np.isin(array[:, 0], nodes)
            if relation.dst == node_type:
                mask |= np.isin(array[:, 1], nodes)
            drop[relation] = mask
        return self.without_edges(drop)

    def with_features(self, node_type: str, matrix: np.ndarray) -> "HeteroGraph":
        features = dict(self._features)
        features[node_type] = matrix
        return HeteroGraph(self._counts, features, self._edges)

    # --- comparaison ---

    def structurally_equal(self, other: "HeteroGraph") -> bool:
        if not isinstance(other, HeteroGraph):
            return False
        if self._counts != other._counts or set(self._edges) != set(other._edges):
            return False
        for t in self._counts:
            if self._features[t].shape != other._features[t].shape \
                    or not np.array_equal(self._features[t], other._features[t]):
                return False
        return all(np.array_equal(self._edges[r], other._edges[r]) for r in self._edges)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, HeteroGraph) and self.structurally_equal(other)

    __hash__ = None

    def summary(self) -> Dict[str, Any]:
        return {
            'node_types': {t: {'count': n, 'feature_dim': self._features[t].shape[1]} for t, n in self._counts.items()},
            'relations': {r.name: len(e) for r, e in self._edges.items()},
        }

    def __repr__(self) -> str:
        return f"<HeteroGraph types={self._counts} edges={self.edge_count()}>"


# =====================================================
# RÔLES ET CIBLES
# =====================================================

@dataclass(frozen=True, eq=False)
class SchemaRoles:
    """Rôles du schéma: type principal, type déclencheur, types auxiliaires, étiquettes et classe cible"""
    primary_type: str
    trigger_type: str
    auxiliary_types: Tuple[str, ...]
    labels: np.ndarray
    target_class: int
    num_classes: int

    @classmethod
    def derive(cls, graph: HeteroGraph, primary_type: str, trigger_type: str, labels: Sequence[int],
               target_class: int, num_classes: Optional[int] = None) -> "SchemaRoles":
        """
        Construit et valide les rôles à partir du graphe

        Raises:
            SchemaError: Type inconnu, étiquettes incomplètes ou classe cible invalide
        """
        labels = np.array(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        roles = cls(primary_type, trigger_type, graph.auxiliary_types(trigger_type, primary_type),
                    _freeze(labels), int(target_class), int(num_classes))
        roles.validate(graph)
        incoming = sorted({r.src for r in graph.relations if r.dst == trigger_type}
                          - {primary_type, trigger_type} - set(roles.auxiliary_types))
        if incoming:
            logger.warning(f"⚠️ Types reliés au déclencheur {trigger_type} seulement par une relation entrante, "
                           f"ignorés comme auxiliaires: {incoming}")
        return roles

    def validate(self, graph: HeteroGraph) -> None:
        problems = []
        for node_type in (self.primary_type, self.trigger_type):
            if node_type not in graph.node_types:
                problems.append(f"type {node_type} absent du graphe")
        if self.primary_type == self.trigger_type:
            problems.append("le type principal et le type déclencheur doivent différer")
        if problems:
            raise SchemaError("; ".join(problems))
        if set(self.auxiliary_types) != set(graph.auxiliary_types(self.trigger_type, self.primary_type)):
            problems.append("types auxiliaires incohérents avec les relations du déclencheur")
        if self.labels.shape != (graph.num_nodes(self.primary_type),):
            problems.append(f"{self.labels.shape[0]} étiquettes pour {graph.num_nodes(self.primary_type)} nœuds principaux")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            problems.append("étiquette hors des classes")
        if not 0 <= self.target_class < self.num_classes:
            problems.append(f"classe cible {self.target_class} hors de [0, {self.num_classes})")
        if problems:
            raise SchemaError("; ".join(problems))

    def with_target(self, target_class: int) -> "SchemaRoles":
        if not 0 <= target_class < self.num_classes:
            raise SchemaError(f"classe cible {target_class} hors de [0, {self.num_classes})")
        return SchemaRoles(self.primary_type, self.trigger_type, self.auxiliary_types,
                           self.labels, int(target_class), self.num_classes)

    def with_labels(self, labels: np.ndarray) -> "SchemaRoles":
        return SchemaRoles(self.primary_type, self.trigger_type, self.auxiliary_types,
                           _freeze(np.array(labels, dtype=np.int64)), self.target_class, self.num_classes)

    @property
    def target_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labels == self.target_class)

    @property
    def non_target_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labels != self.target_class)


@dataclass(frozen=True, eq=False)
class Split:
    """Découpage des nœuds principaux (train / test / validation)"""
    train: np.ndarray
    test: np.ndarray
    val: np.ndarray

    def to_dict(self) -> Dict[str, List[int]]:
        return {'train': self.train.tolist(), 'test': self.test.tolist(), 'val': self.val.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[int]]) -> "Split":
        return cls(*(np.asarray(data[k], dtype=np.int64) for k in ('train', 'test', 'val')))


@dataclass(frozen=True, eq=False)
class AttackTargets:
    """Victimes empoisonnées (train et test) et partition cible / non-cible"""
    poisoned_train: np.ndarray
    poisoned_test: np.ndarray
    target_class_nodes: np.ndarray
    non_target_nodes: np.ndarray
    split: Split

    def __post_init__(self):
        if np.intersect1d(self.poisoned_train, self.poisoned_test).size:
            raise ConfigurationError("Les ensembles empoisonnés train et test se recouvrent")
        if np.intersect1d(self.target_class_nodes, self.non_target_nodes).size:
            raise ConfigurationError("Les nœuds cible et non-cible se recouvrent")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'poisoned_train': self.poisoned_train.tolist(),
            'poisoned_test': self.poisoned_test.tolist(),
            'split': self.split.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], roles: SchemaRoles) -> "AttackTargets":
        return cls(np.asarray(data['poisoned_train'], dtype=np.int64),
                   np.asarray(data['poisoned_test'], dtype=np.int64),
                   roles.target_nodes, roles.non_target_nodes, Split.from_dict(data['split']))


# =====================================================
# DELTA D'EMPOISONNEMENT
# =====================================================

@dataclass(frozen=True)
class NewEdge:
    """Arête ajoutée: (nœud déclencheur injecté, autre extrémité, relation)"""
    trigger: int
    other: int
    relation: Relation

    def oriented(self, trigger_type: str) -> Tuple[int, int]:
        return (self.trigger, self.other) if self.relation.src == trigger_type else (self.other, self.trigger)


@dataclass(frozen=True, eq=False)
class GraphDelta:
    """
    Nœuds déclencheurs injectés, leurs features et leurs arêtes

    Les identifiants des nouveaux déclencheurs sont base_count, base_count+1, ... (ajoutés après
    les nœuds existants du type déclencheur).
    """
    trigger_type: str
    base_count: int
    new_features: np.ndarray
    new_edges: Tuple[NewEdge, ...] = ()
    victim_of: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, trigger_type: str, base_count: int, feature_dim: int) -> "GraphDelta":
        return cls(trigger_type, base_count, np.zeros((0, feature_dim)))

    @property
    def size(self) -> int:
        return int(self.new_features.shape[0])

    @property
    def new_trigger_ids(self) -> np.ndarray:
        return np.arange(self.base_count, self.base_count + self.size, dtype=np.int64)

    @property
    def victims(self) -> np.ndarray:
        return np.array([self.victim_of[t] for t in self.new_trigger_ids], dtype=np.int64)

    def concat(self, other: "GraphDelta") -> "GraphDelta":
        """Empile `other` après ce delta (ses identifiants sont décalés de `self.size`)"""
        if other.trigger_type != self.trigger_type or other.base_count != self.base_count:
            raise DeltaValidationError(["deltas construits sur des bases différentes"])
        shift = self.size
        edges = self.new_edges + tuple(NewEdge(e.trigger + shift, e.other, e.relation) for e in other.new_edges)
        victims = dict(self.victim_of)
        victims.update({t + shift: v for t, v in other.victim_of.items()})
        features = np.vstack([self.new_features, other.new_features])
        return GraphDelta(self.trigger_type, self.base_count, features, edges, victims)

    def aux_links(self, aux_type: str) -> Dict[int, List[int]]:
        links: Dict[int, List[int]] = {int(t): [] for t in self.new_trigger_ids}
        for edge in self.new_edges:
            if edge.relation.src == self.trigger_type and edge.relation.dst == aux_type:
                links[edge.trigger].append(edge.other)
        return links

    def to_dict(self) -> Dict[str, Any]:
        return {
            'trigger_type': self.trigger_type,
            'base_count': self.base_count,
            'new_features': self.new_features.tolist(),
            'feature_dim': int(self.new_features.shape[1]),
            'new_edges': [[e.trigger, e.other, e.relation.src, e.relation.dst] for e in self.new_edges],
            'victim_of': [[int(t), int(v)] for t, v in sorted(self.victim_of.items())],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GraphDelta":
        features = np.asarray(data['new_features'], dtype=np.float64).reshape(-1, data['feature_dim'])
        edges = tuple(NewEdge(int(t), int(o), Relation(s, d)) for t, o, s, d in data['new_edges'])
        return cls(data['trigger_type'], int(data['base_count']), features, edges,
                   {int(t): int(v) for t, v in data['victim_of']})


def validate_delta(graph: HeteroGraph, delta: GraphDelta, primary_type: Optional[str] = None,
                   budgets: Optional[Mapping[str, int]] = None,
                   allowed: Optional[Mapping[str, Iterable[int]]] = None) -> List[str]:
    """
    Liste les violations d'un delta vis-à-vis d'un graphe

    Args:
        graph: Graphe propre
        delta: Delta candidat
        primary_type: Type principal (active la vérification « un seul lien victime »)
        budgets: K_{t_a} attendu par type auxiliaire (optionnel)
        allowed: Pools C*_{t_a} autorisés par type auxiliaire (optionnel)

    Returns:
        List[str]: Violations (vide si le delta est valide)
    """
    problems: List[str] = []
    t_tr = delta.trigger_type
    if t_tr not in graph.node_types:
        return [f"type déclencheur inconnu {t_tr}"]
    if delta.base_count != graph.num_nodes(t_tr):
        problems.append(f"base_count {delta.base_count} différent de {graph.num_nodes(t_tr)} nœuds existants")
    if delta.new_features.ndim != 2 or delta.new_features.shape[1] != graph.feature_dim(t_tr):
        problems.append(f"largeur de features {delta.new_features.shape} au lieu de {graph.feature_dim(t_tr)}")
    elif not np.all(np.isfinite(delta.new_features)):
        problems.append("features injectées non finies")

    new_ids = set(int(t) for t in delta.new_trigger_ids)
    if set(delta.victim_of) != new_ids:
        problems.append("victim_of ne couvre pas exactement les nouveaux déclencheurs")

    seen: Set[Tuple[int, int, Relation]] = set()
    victim_links: Dict[int, int] = {t: 0 for t in new_ids}
    aux_counts: Dict[Tuple[int, str], int] = {}
    allowed_sets = {t: set(int(u) for u in ids) for t, ids in (allowed or {}).items()}
    for edge in delta.new_edges:
        relation = edge.relation
        if relation not in graph.relations:
            problems.append(f"relation inconnue {relation}")
            continue
        if t_tr not in (relation.src, relation.dst):
            problems.append(f"relation {relation} sans le type déclencheur")
            continue
        if edge.trigger not in new_ids:
            problems.append(f"déclencheur {edge.trigger} hors des nouveaux identifiants")
            continue
        other_type = relation.dst if relation.src == t_tr else relation.src
        if not 0 <= edge.other < graph.num_nodes(other_type):
            problems.append(f"extrémité {edge.other} hors bornes pour {other_type}")
            continue
        key = (edge.trigger, edge.other, relation)
        if key in seen:
            problems.append(f"arête dupliquée {edge.trigger}-{edge.other} ({relation})")
            continue
        seen.add(key)
        if other_type == primary_type:
            victim_links[edge.trigger] += 1
            if delta.victim_of.get(edge.trigger) != edge.other:
                problems.append(f"lien victime {edge.trigger}-{edge.other} incohérent avec victim_of")
        elif relation.src == t_tr:
            aux_counts[(edge.trigger, other_type)] = aux_counts.get((edge.trigger, other_type), 0) + 1
            if other_type in allowed_sets and edge.other not in allowed_sets[other_type]:
                problems.append(f"extrémité {edge.other} ({other_type}) hors du pool de candidats")

    if primary_type is not None:
        for trigger, count in victim_links.items():
            if count != 1:
                problems.append(f"déclencheur {trigger}: {count} lien(s) victime au lieu de 1")
    for aux_type, budget in (budgets or {}).items():
        for trigger in new_ids:
            count = aux_counts.get((trigger, aux_type), 0)
            if count != budget:
                problems.append(f"déclencheur {trigger}: {count} lien(s) vers {aux_type} au lieu de {budget}")
    return problems


def apply_delta(graph: HeteroGraph, delta: GraphDelta, primary_type: Optional[str] = None,
                budgets: Optional[Mapping[str, int]] = None,
                allowed: Optional[Mapping[str, Iterable[int]]] = None) -> HeteroGraph:
    """
    Produit le graphe empoisonné G̃ (le graphe d'origine n'est pas modifié)

    Raises:
        DeltaValidationError: Liste des entrées fautives
    """
    problems = validate_delta(graph, delta, primary_type, budgets, allowed)
    if problems:
        raise DeltaValidationError(problems)
    if delta.size == 0 and not delta.new_edges:
        return graph

    t_tr = delta.trigger_type
    counts = graph.node_counts
    counts[t_tr] += delta.size
    features = {t: graph.features(t) for t in graph.node_types}
    features[t_tr] = np.vstack([graph.features(t_tr), delta.new_features])

    added: Dict[Relation, List[Tuple[int, int]]] = {}
    for edge in delta.new_edges:
        added.setdefault(edge.relation, []).append(edge.oriented(t_tr))
    edges = {}
    for relation in graph.relations:
        extra = added.get(relation)
        base = graph.edges(relation)
        edges[relation] = base if not extra else np.vstack([base, np.asarray(extra, dtype=np.int64)])
    try:
        return HeteroGraph(counts, features, edges)
    except GraphValidationError as e:
        raise DeltaValidationError(e.violations)


# =====================================================
# REQUÊTES
# =====================================================

def degree(graph: HeteroGraph, relation: RelationLike, node: int) -> int:
    """Nombre d'arêtes incidentes à `node` (type source) sous la relation"""
    return graph.degree(relation, node)


def two_hop_aux_neighbors(graph: HeteroGraph, roles: SchemaRoles, v_p: int, aux_type: str) -> Set[int]:
    """
    Voisins auxiliaires à 2 sauts via un nœud déclencheur: {u | ∃ tr adjacent à v_p et à u}

    Raises:
        SchemaError: Type non auxiliaire ou relation manquante
    """
    if aux_type not in roles.auxiliary_types:
        raise SchemaError(f"{aux_type} n'est pas un type auxiliaire de {roles.trigger_type}")
    to_trigger, reverse_pt = graph.link(roles.primary_type, roles.trigger_type)
    to_aux = graph.relation((roles.trigger_type, aux_type))
    triggers = graph.neighbors(to_trigger, v_p, reverse=reverse_pt)
    if triggers.size == 0:
        return set()
    rows = graph.adjacency(to_aux)[triggers]
    return set(int(u) for u in np.unique(rows.indices))


def two_hop_matrix(graph: HeteroGraph, roles: SchemaRoles, aux_type: str) -> sp.csr_matrix:
    """Matrice (n_p x n_a) des chemins principal → déclencheur → auxiliaire"""
    to_trigger, reverse_pt = graph.link(roles.primary_type, roles.trigger_type)
    to_aux = graph.relation((roles.trigger_type, aux_type))
    return (graph.adjacency(to_trigger, reverse_pt) @ graph.adjacency(to_aux)).tocsr()


# =====================================================
# FORMAT DOCUMENT (JSON)
# =====================================================

def graph_to_document(graph: HeteroGraph, roles: Optional[SchemaRoles] = None) -> Dict[str, Any]:
    document: Dict[str, Any] = {
        'node_types': {
            t: {'count': graph.num_nodes(t), 'feature_dim': graph.feature_dim(t),
                'features': graph.features(t).ravel().tolist()}
            for t in graph.node_types
        },
        'node_order': list(graph.node_types),
        'relations': [
            {'src': r.src, 'dst': r.dst, 'edges': graph.edges(r).tolist()} for r in graph.relations
        ],
    }
    if roles is not None:
        document['roles'] = {
            'primary': roles.primary_type,
            'trigger': roles.trigger_type,
            'target_class': roles.target_class,
            'num_classes': roles.num_classes,
            'labels': roles.labels.tolist(),
        }
    return document


def graph_from_document(document: Mapping[str, Any]) -> Tuple[HeteroGraph, Optional[SchemaRoles]]:
    """
    Reconstruit graphe et rôles depuis un document JSON

    Raises:
        GraphValidationError: Les 10 premières violations détectées
    """
    violations: List[str] = []
    counts, features = {}, {}
    entries = document.get('node_types', {})
    order = document.get('node_order') or list(entries)
    if set(order) != set(entries):
        violations.append(f"node_order {sorted(order)} incohérent avec les types {sorted(entries)}")
        order = list(entries)
    for node_type in order:
        entry = entries[node_type]
        try:
            count, dim = int(entry['count']), int(entry['feature_dim'])
            flat = np.asarray(entry['features'], dtype=np.float64)
            if flat.size != count * dim:
                violations.append(f"type {node_type}: {flat.size} valeurs pour {count}x{dim}")
                continue
            counts[node_type] = count
            features[node_type] = flat.reshape(count, dim)
        except (KeyError, TypeError, ValueError) as e:
            violations.append(f"type {node_type}: entrée mal formée ({e})")
    edges = {}
    for entry in document.get('relations', []):
        try:
            edges[Relation(entry['src'], entry['dst'])] = entry['edges']
        except KeyError as e:
            violations.append(f"relation mal formée: clé {e} manquante")
    if violations:
        raise GraphValidationError(violations[:MAX_REPORTED_VIOLATIONS])

    graph = HeteroGraph(counts, features, edges)
    roles_doc = document.get('roles')
    if roles_doc is None:
        return graph, None
    roles = SchemaRoles.derive(graph, roles_doc['primary'], roles_doc['trigger'], roles_doc['labels'],
                               roles_doc['target_class'], roles_doc.get('num_classes'))
    return graph, roles
