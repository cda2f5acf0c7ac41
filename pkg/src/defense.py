"""
Défenses structurelles: détection par clusters (CSD), élagage par similarité et détection d'anomalies
"""
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.exceptions import ConvergenceWarning
from sklearn.neighbors import NearestNeighbors
from sklearn.neural_network import MLPRegressor
from sklearn.preprocessing import StandardScaler

from src.exceptions import ClusteringError, ConfigurationError
from src.heterograph import HeteroGraph, Relation, SchemaRoles
from src.schemas import DefenseConfig

logger = logging.getLogger(__name__)

MAX_KMEANS_RESTARTS = 50


# =====================================================
# RAPPORTS
# =====================================================

class TypeDefenseReport(BaseModel):
    """Résultat d'une défense pour un type de nœud"""
    model_config = ConfigDict(ser_json_inf_nan='constants')

    node_type: str
    separation_ratio: Optional[float] = None
    suspicious_count: int = 0
    pruned_edges: int = 0
    dropped: List[int] = Field(default_factory=list)
    note: Optional[str] = None


class RectifiedNode(BaseModel):
    node: int
    old_label: int
    new_label: int


class DefenseReport(BaseModel):
    """Rapport JSON d'une défense appliquée à un graphe"""
    model_config = ConfigDict(ser_json_inf_nan='constants')

    defense: str
    types: List[TypeDefenseReport] = Field(default_factory=list)
    removed_edges: int = 0
    rectified: List[RectifiedNode] = Field(default_factory=list)

    def by_type(self, node_type: str) -> TypeDefenseReport:
        for entry in self.types:
            if entry.node_type == node_type:
                return entry
        raise KeyError(node_type)


@dataclass
class DefenseOutcome:
    """Graphe purifié, étiquettes (éventuellement rectifiées) et rapport"""
    graph: HeteroGraph
    labels: np.ndarray
    report: DefenseReport


# =====================================================
# RATIO DE SÉPARATION
# =====================================================

@dataclass(eq=False)
class ClusterSummary:
    """Deux clusters: centroïdes, rayons RMS et membres"""
    centroids: np.ndarray
    radii: np.ndarray
    members: Tuple[np.ndarray, np.ndarray]

    @classmethod
    def from_assignment(cls, points: np.ndarray, assignment: np.ndarray) -> "ClusterSummary":
        """
        Résume une partition en deux clusters

        Raises:
            ClusteringError: Si un des clusters est vide
        """
        points = np.asarray(points, dtype=np.float64)
        members = tuple(np.flatnonzero(assignment == c) for c in (0, 1))
        if any(m.size == 0 for m in members):
            raise ClusteringError(f"Cluster vide (tailles {[m.size for m in members]})")
        centroids = np.stack([points[m].mean(axis=0) for m in members])
        radii = np.array([
            math.sqrt(float(np.mean(np.sum((points[m] - centroids[c]) ** 2, axis=1))))
            for c, m in enumerate(members)
        ])
        return cls(centroids, radii, members)

    @property
    def sizes(self) -> Tuple[int, int]:
        return int(self.members[0].size), int(self.members[1].size)

    @property
    def ratio(self) -> float:
        return separation_ratio(self)


def separation_ratio(summary: ClusterSummary) -> float:
    """
    R = ‖μ_1 − μ_2‖₂ / (σ_1 + σ_2), +∞ si σ_1 + σ_2 = 0

    Raises:
        ClusteringError: Si un des clusters est vide
    """
    if any(np.asarray(m).size == 0 for m in summary.members):
        raise ClusteringError("Ratio de séparation sur un cluster vide")
    distance = float(np.linalg.norm(summary.centroids[0] - summary.centroids[1]))
    spread = float(summary.radii[0] + summary.radii[1])
    if spread == 0.0:
        return math.inf
    return distance / spread


# =====================================================
# CSD
# =====================================================

def _cluster_type(node_type: str, features: np.ndarray, config: DefenseConfig,
                  seed: int) -> Tuple[TypeDefenseReport, np.ndarray]:
    """PCA + 2-moyennes pour un type; renvoie le rapport et les nœuds suspects"""
    n, d = features.shape
    if n < 2:
        return TypeDefenseReport(node_type=node_type, note=f"{n} nœud(s): type ignoré"), np.zeros(0, dtype=np.int64)

    latent = PCA(n_components=min(config.latent_dim, n, d), random_state=seed).fit_transform(features)
    kmeans = KMeans(n_clusters=2, init='k-means++', n_init=min(config.kmeans_restarts, MAX_KMEANS_RESTARTS),
                    random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        assignment = kmeans.fit_predict(latent)
    try:
        summary = ClusterSummary.from_assignment(latent, assignment)
    except ClusteringError as e:
        return TypeDefenseReport(node_type=node_type, note=str(e)), np.zeros(0, dtype=np.int64)

    ratio = summary.ratio
    report = TypeDefenseReport(node_type=node_type, separation_ratio=ratio)
    if ratio <= config.separation_threshold:
        return report, np.zeros(0, dtype=np.int64)
    # À taille égale, le second cluster est déclaré suspect
    sizes = summary.sizes
    suspicious = summary.members[0] if sizes[0] < sizes[1] else summary.members[1]
    report.suspicious_count = int(suspicious.size)
    return report, suspicious.astype(np.int64)


def _incident_masks(graph: HeteroGraph, suspicious: Dict[str, np.ndarray]) -> Dict[Relation, np.ndarray]:
    masks = {}
    for relation in graph.relations:
        edges = graph.edges(relation)
        mask = np.zeros(len(edges), dtype=bool)
        if suspicious.get(relation.src) is not None:
            mask |= np.isin(edges[:, 0], suspicious[relation.src])
        if suspicious.get(relation.dst) is not None:
            mask |= np.isin(edges[:, 1], suspicious[relation.dst])
        masks[relation] = mask
    return masks


def _adjacent_primary(graph: HeteroGraph, node_type: str, nodes: np.ndarray, primary_type: str) -> np.ndarray:
    """Nœuds principaux adjacents à `nodes` (toutes relations, deux sens)"""
    found = []
    for relation in graph.relations:
        edges = graph.edges(relation)
        if relation.src == node_type and relation.dst == primary_type:
            found.append(edges[np.isin(edges[:, 0], nodes), 1])
        if relation.dst == node_type and relation.src == primary_type:
            found.append(edges[np.isin(edges[:, 1], nodes), 0])
    if not found:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(found)).astype(np.int64)


def rectify_labels(features: np.ndarray, labels: np.ndarray, victims: np.ndarray, reference: np.ndarray,
                   k: int, num_classes: int) -> np.ndarray:
    """
    Vote majoritaire des k plus proches voisins (distance euclidienne) parmi `reference`

    Égalité → plus petite classe.

    Returns:
        np.ndarray: Nouvelles étiquettes des victimes (dans l'ordre de `victims`)
    """
    if reference.size == 0:
        raise ConfigurationError("Aucun nœud de référence pour la rectification")
    neighbours = NearestNeighbors(n_neighbors=min(k, reference.size)).fit(features[reference])
    _, index = neighbours.kneighbors(features[victims])
    votes = labels[reference][index]
    return np.array([np.bincount(row, minlength=num_classes).argmax() for row in votes], dtype=np.int64)


def csd_defend(graph: HeteroGraph, labels: np.ndarray, roles: SchemaRoles,
               config: Optional[DefenseConfig] = None, seed: int = 0) -> DefenseOutcome:
    """
    Défense structurelle par clusters

    Pour chaque type: PCA, 2-moyennes et ratio R. Si R > τ_R, le plus petit cluster est suspect;
    toutes ses arêtes sont élaguées et les nœuds principaux qui lui étaient adjacents voient leur
    étiquette rectifiée par vote des k plus proches voisins sains du même type.

    Args:
        graph: Graphe (éventuellement empoisonné)
        labels: Étiquettes des nœuds principaux (éventuellement empoisonnées)
        roles: Rôles du schéma
        config: Configuration des défenses
        seed: Graine de la PCA et des 2-moyennes

    Returns:
        DefenseOutcome: Graphe purifié, étiquettes rectifiées, rapport
    """
    config = config or DefenseConfig()
    labels = np.array(labels, dtype=np.int64)
    types = list(graph.node_types)
    logger.info(f"🔄 CSD sur {len(types)} types (τ_R={config.separation_threshold})")

    results = Parallel(n_jobs=config.n_jobs, prefer="threads")(
        delayed(_cluster_type)(t, graph.features(t), config, seed) for t in types
    )
    suspicious = {t: ids for t, (_, ids) in zip(types, results) if ids.size}

    masks = _incident_masks(graph, suspicious)
    entries = []
    for t, (entry, ids) in zip(types, results):
        if ids.size:
            entry.pruned_edges = int(sum(m.sum() for m in _incident_masks(graph, {t: ids}).values()))
            logger.warning(f"⚠️ Type {t}: R={entry.separation_ratio:.2f}, {ids.size} nœuds suspects")
        entries.append(entry)
    report = DefenseReport(defense='csd', types=entries, removed_edges=int(sum(m.sum() for m in masks.values())))

    if not suspicious:
        logger.info("✅ CSD: aucun type au-delà du seuil, graphe inchangé")
        return DefenseOutcome(graph, labels, report)

    victims = np.unique(np.concatenate([
        _adjacent_primary(graph, t, ids, roles.primary_type) for t, ids in suspicious.items()
    ])).astype(np.int64)
    purified = graph.without_edges(masks)

    if victims.size:
        flagged = suspicious.get(roles.primary_type, np.zeros(0, dtype=np.int64))
        reference = np.setdiff1d(np.arange(graph.num_nodes(roles.primary_type)), np.union1d(victims, flagged))
        if reference.size == 0:
            logger.warning("⚠️ Aucun nœud sain pour la rectification: étiquettes conservées")
        else:
            new = rectify_labels(graph.features(roles.primary_type), labels, victims, reference,
                                 config.rectify_neighbors, roles.num_classes)
            report.rectified = [RectifiedNode(node=int(v), old_label=int(labels[v]), new_label=int(y))
                                for v, y in zip(victims, new)]
            labels[victims] = new

    logger.info(f"✅ CSD: {report.removed_edges} arêtes élaguées, {len(report.rectified)} étiquettes rectifiées")
    return DefenseOutcome(purified, labels, report)


# =====================================================
# ÉLAGAGE PAR SIMILARITÉ
# =====================================================

def shared_projection(graph: HeteroGraph, projection_dim: int, seed: int) -> Dict[str, np.ndarray]:
    """Projection gaussienne commune: le type t utilise les d_t premières lignes"""
    width = max(graph.feature_dim(t) for t in graph.node_types)
    matrix = np.random.default_rng(seed).normal(0.0, 1.0 / math.sqrt(projection_dim), size=(width, projection_dim))
    return {t: graph.features(t) @ matrix[:graph.feature_dim(t)] for t in graph.node_types}


def edge_similarities(graph: HeteroGraph, projection_dim: int, seed: int) -> Dict[Relation, np.ndarray]:
    """Similarité cosinus par arête dans l'espace projeté (norme nulle → 0)"""
    projected = shared_projection(graph, projection_dim, seed)
    norms = {t: np.linalg.norm(z, axis=1) for t, z in projected.items()}
    similarities = {}
    for relation in graph.relations:
        edges = graph.edges(relation)
        left, right = projected[relation.src][edges[:, 0]], projected[relation.dst][edges[:, 1]]
        denom = norms[relation.src][edges[:, 0]] * norms[relation.dst][edges[:, 1]]
        dots = np.einsum('ij,ij->i', left, right)
        similarities[relation] = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return similarities


def prune_defense(graph: HeteroGraph, fraction: float = 0.1, seed: int = 0,
                  projection_dim: int = 16) -> Tuple[HeteroGraph, DefenseReport]:
    """
    Retire la fraction d'arêtes les moins similaires (classement global, égalité → identifiant d'arête)

    Raises:
        ConfigurationError: Fraction hors de [0, 0.5]
    """
    if not 0.0 <= fraction <= 0.5:
        raise ConfigurationError(f"Fraction d'élagage {fraction} hors de [0, 0.5]")
    total = graph.edge_count()
    count = int(math.floor(round(fraction * total, 9)))
    report = DefenseReport(defense='prune')
    if count == 0:
        return graph, report

    similarities = edge_similarities(graph, projection_dim, seed)
    relations = list(graph.relations)
    flat = np.concatenate([similarities[r] for r in relations])
    order = np.lexsort((np.arange(flat.size), flat))[:count]
    removed = np.zeros(flat.size, dtype=bool)
    removed[order] = True

    masks, offset = {}, 0
    for relation in relations:
        size = graph.edge_count(relation)
        masks[relation] = removed[offset:offset + size]
        offset += size
    by_type: Dict[str, int] = {t: 0 for t in graph.node_types}
    for relation, mask in masks.items():
        by_type[relation.src] += int(mask.sum())
        if relation.dst != relation.src:
            by_type[relation.dst] += int(mask.sum())
    report.types = [TypeDefenseReport(node_type=t, pruned_edges=c) for t, c in by_type.items()]
    report.removed_edges = count
    logger.info(f"✅ Élagage: {count}/{total} arêtes retirées")
    return graph.without_edges(masks), report


# =====================================================
# DÉTECTION D'ANOMALIES (AUTOENCODEUR)
# =====================================================

def reconstruction_errors(features: np.ndarray, latent_dim: int, epochs: int, seed: int) -> np.ndarray:
    """MSE de reconstruction par nœud d'un autoencodeur linéaire à une couche cachée"""
    scaled = StandardScaler().fit_transform(features)
    autoencoder = MLPRegressor(hidden_layer_sizes=(latent_dim,), activation='identity', solver='lbfgs',
                               max_iter=epochs, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        autoencoder.fit(scaled, scaled)
    return np.mean((scaled - autoencoder.predict(scaled)) ** 2, axis=1)


def _od_type(node_type: str, features: np.ndarray, config: DefenseConfig, seed: int) -> TypeDefenseReport:
    n = features.shape[0]
    if n < config.latent_dim:
        return TypeDefenseReport(node_type=node_type, note=f"{n} nœuds < dimension latente {config.latent_dim}")
    count = int(math.floor(round(config.od_drop_fraction * n, 9)))
    if count == 0:
        return TypeDefenseReport(node_type=node_type)
    errors = reconstruction_errors(features, config.latent_dim, config.od_epochs, seed)
    ranking = np.lexsort((np.arange(n), -errors))
    return TypeDefenseReport(node_type=node_type, dropped=sorted(int(v) for v in ranking[:count]))


def od_defense(graph: HeteroGraph, config: Optional[DefenseConfig] = None,
               seed: int = 0) -> Tuple[HeteroGraph, DefenseReport]:
    """
    Isole, pour chaque type, la fraction de nœuds la plus mal reconstruite

    Les nœuds écartés gardent leur identifiant et perdent toutes leurs arêtes.
    """
    config = config or DefenseConfig()
    types = list(graph.node_types)
    entries = Parallel(n_jobs=config.n_jobs, prefer="threads")(
        delayed(_od_type)(t, graph.features(t), config, seed) for t in types
    )
    purified = graph
    for entry in entries:
        if entry.note:
            logger.warning(f"⚠️ OD: type {entry.node_type} ignoré ({entry.note})")
        if entry.dropped:
            before = purified.edge_count()
            purified = purified.isolate_nodes(entry.node_type, entry.dropped)
            entry.pruned_edges = before - purified.edge_count()
    report = DefenseReport(defense='od', types=entries, removed_edges=graph.edge_count() - purified.edge_count())
    logger.info(f"✅ OD: {sum(len(e.dropped) for e in entries)} nœuds isolés, {report.removed_edges} arêtes retirées")
    return purified, report


def apply_defense(name: str, graph: HeteroGraph, labels: np.ndarray, roles: SchemaRoles,
                  config: Optional[DefenseConfig] = None, seed: int = 0) -> DefenseOutcome:
    """Point d'entrée commun des trois défenses"""
    config = config or DefenseConfig()
    if name == 'csd':
        return csd_defend(graph, labels, roles, config, seed)
    if name == 'prune':
        purified, report = prune_defense(graph, config.prune_fraction, seed, config.projection_dim)
    elif name == 'od':
        purified, report = od_defense(graph, config, seed)
    else:
        raise ConfigurationError(f"Défense inconnue: {name}")
    return DefenseOutcome(purified, np.array(labels, dtype=np.int64), report)
