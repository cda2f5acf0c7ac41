"""
Tests des défenses: ratio de séparation, CSD, élagage par similarité et détection d'anomalies
"""
import math

import numpy as np
import pytest

from conftest import TINY_LABELS
from src.defense import (
    ClusterSummary,
    TypeDefenseReport,
    apply_defense,
    csd_defend,
    edge_similarities,
    od_defense,
    prune_defense,
    rectify_labels,
    separation_ratio,
)
from src.exceptions import ClusteringError, ConfigurationError
from src.heterograph import HeteroGraph, Relation, SchemaRoles
from src.schemas import DefenseConfig

PA = Relation('paper', 'author')
AS = Relation('author', 'subject')


def _random_graph(features, rng, degree=2):
    """Chaque article cite `degree` auteurs, chaque auteur traite `degree` sujets"""
    counts = {t: x.shape[0] for t, x in features.items()}
    edges = {
        PA: [(u, int(v)) for u in range(counts['paper'])
             for v in rng.choice(counts['author'], size=degree, replace=False)],
        AS: [(u, int(v)) for u in range(counts['author'])
             for v in rng.choice(counts['subject'], size=degree, replace=False)],
    }
    return HeteroGraph(counts, features, edges)


def _roles(graph, rng):
    labels = rng.integers(0, 3, size=graph.num_nodes('paper'))
    return SchemaRoles.derive(graph, 'paper', 'author', labels, target_class=0, num_classes=3)


# =====================================================
# RATIO DE SÉPARATION
# =====================================================

def test_separation_ratio_reference_values():
    """Centroïdes confondus → 0; μ=(0,0)/(4,0) et σ=1 → 2; deux singletons → +∞"""
    members = (np.array([0]), np.array([1]))
    same = ClusterSummary(np.zeros((2, 2)), np.array([1.0, 1.0]), members)
    assert separation_ratio(same) == 0.0
    apart = ClusterSummary(np.array([[0.0, 0.0], [4.0, 0.0]]), np.array([1.0, 1.0]), members)
    assert separation_ratio(apart) == pytest.approx(2.0)
    singletons = ClusterSummary.from_assignment(np.array([[0.0], [1.0]]), np.array([0, 1]))
    assert separation_ratio(singletons) == math.inf


def test_separation_ratio_uses_rms_radius():
    """Rayon = racine de la distance quadratique moyenne au centroïde"""
    points = np.array([[-1.0, 0.0], [1.0, 0.0], [9.0, 0.0], [11.0, 0.0]])
    summary = ClusterSummary.from_assignment(points, np.array([0, 0, 1, 1]))
    assert summary.radii.tolist() == [1.0, 1.0]
    assert summary.ratio == pytest.approx(5.0)
    assert summary.sizes == (2, 2)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separation_ratio_is_similarity_invariant(seed):
    """Rotation, translation et homothétie uniforme des représentations: même ratio"""
    rng = np.random.default_rng(seed)
    points = np.vstack([rng.normal(0.0, 1.0, (15, 4)), rng.normal(3.0, 0.5, (10, 4))])
    assignment = np.repeat([0, 1], [15, 10])
    rotation, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    moved = 2.5 * points @ rotation + rng.normal(0.0, 10.0, 4)
    expected = ClusterSummary.from_assignment(points, assignment).ratio
    assert ClusterSummary.from_assignment(moved, assignment).ratio == pytest.approx(expected, rel=1e-9)


def test_empty_cluster_raises():
    with pytest.raises(ClusteringError):
        ClusterSummary.from_assignment(np.zeros((3, 2)), np.zeros(3, dtype=int))


def test_infinite_ratio_is_serialized_as_constant():
    """Le rapport JSON écrit +∞ comme constante"""
    assert 'Infinity' in TypeDefenseReport(node_type='a', separation_ratio=math.inf).model_dump_json()


# =====================================================
# CSD
# =====================================================

def test_csd_leaves_unimodal_graph_unchanged():
    """Features gaussiennes unimodales: aucun type au-delà du seuil, graphe inchangé"""
    rng = np.random.default_rng(0)
    features = {'paper': rng.standard_normal((200, 16)), 'author': rng.standard_normal((100, 16)),
                'subject': rng.standard_normal((100, 16))}
    graph = _random_graph(features, rng)
    roles = _roles(graph, rng)
    outcome = csd_defend(graph, roles.labels, roles)
    assert all(entry.separation_ratio < 2.0 for entry in outcome.report.types)
    assert outcome.graph is graph
    assert outcome.report.removed_edges == 0
    assert np.array_equal(outcome.labels, roles.labels)


def test_csd_prunes_injected_cluster():
    """Cluster injecté (10 % des auteurs, moyenne 10·1): détecté, arêtes élaguées, victimes rectifiées"""
    rng = np.random.default_rng(1)
    authors = rng.standard_normal((100, 16))
    injected = np.arange(90, 100)
    authors[injected] += 10.0
    features = {'paper': rng.standard_normal((200, 16)), 'author': authors,
                'subject': rng.standard_normal((100, 16))}
    graph = _random_graph(features, rng)
    roles = _roles(graph, rng)

    outcome = csd_defend(graph, roles.labels, roles)
    entry = outcome.report.by_type('author')
    assert entry.separation_ratio > 2.0
    assert entry.suspicious_count == 10
    assert all(outcome.graph.degree(AS, v) == 0 for v in injected)
    assert all(outcome.graph.degree(PA, v, reverse=True) == 0 for v in injected)
    assert outcome.report.by_type('paper').suspicious_count == 0

    victims = np.unique(graph.edges(PA)[np.isin(graph.edges(PA)[:, 1], injected), 0])
    assert sorted(r.node for r in outcome.report.rectified) == victims.tolist()
    expected_removed = int(np.isin(graph.edges(PA)[:, 1], injected).sum() + np.isin(graph.edges(AS)[:, 0], injected).sum())
    assert outcome.report.removed_edges == expected_removed
    assert entry.pruned_edges == expected_removed


def test_rectify_labels_majority_vote():
    """Voisins [1, 1, 2] avec k=3 → 1; égalité → plus petite classe"""
    features = np.array([[0.0], [0.1], [0.2], [0.3], [10.0]])
    labels = np.array([0, 1, 1, 2, 0])
    assert rectify_labels(features, labels, np.array([0]), np.array([1, 2, 3, 4]), 3, 3).tolist() == [1]
    tie = np.array([0, 2, 1, 2, 0])
    assert rectify_labels(features, tie, np.array([0]), np.array([1, 2]), 2, 3).tolist() == [1]


def test_csd_skips_tiny_types():
    """Type de moins de deux nœuds: ignoré avec une note"""
    features = {'paper': np.random.default_rng(0).standard_normal((4, 2)), 'author': np.ones((1, 2)),
                'subject': np.random.default_rng(1).standard_normal((3, 2))}
    tiny = HeteroGraph({'paper': 4, 'author': 1, 'subject': 3}, features,
                       {PA: [(0, 0), (1, 0)], AS: [(0, 1)]})
    roles = SchemaRoles.derive(tiny, 'paper', 'author', [0, 1, 2, 0], target_class=0, num_classes=3)
    report = csd_defend(tiny, roles.labels, roles).report
    assert report.by_type('author').note is not None


# =====================================================
# ÉLAGAGE PAR SIMILARITÉ
# =====================================================

def _hundred_edge_graph():
    rng = np.random.default_rng(4)
    features = {'paper': rng.standard_normal((30, 5)), 'author': rng.standard_normal((20, 3)),
                'subject': rng.standard_normal((20, 4))}
    return _random_graph(features, rng)


def test_prune_fraction_zero_is_identity(graph):
    purified, report = prune_defense(graph, 0.0)
    assert purified is graph
    assert report.removed_edges == 0


def test_prune_removes_lowest_similarities():
    """10 % de 100 arêtes → 10 arêtes retirées, les moins similaires (oracle: tri complet)"""
    graph = _hundred_edge_graph()
    assert graph.edge_count() == 100
    purified, report = prune_defense(graph, 0.1, seed=3, projection_dim=8)
    assert report.removed_edges == 10
    assert purified.edge_count() == 90

    matrix = np.random.default_rng(3).normal(0.0, 1.0 / math.sqrt(8), size=(5, 8))
    flat = []
    for relation in graph.relations:
        for u, v in graph.edges(relation):
            left = graph.features(relation.src)[u] @ matrix[:graph.feature_dim(relation.src)]
            right = graph.features(relation.dst)[v] @ matrix[:graph.feature_dim(relation.dst)]
            flat.append((float(left @ right / (np.linalg.norm(left) * np.linalg.norm(right))), relation, int(u), int(v)))
    removed = sorted(range(len(flat)), key=lambda i: (flat[i][0], i))[:10]
    for i in removed:
        _, relation, u, v = flat[i]
        assert v not in purified.neighbors(relation, u)

    similarities = edge_similarities(graph, 8, 3)
    assert np.allclose(np.concatenate([similarities[r] for r in graph.relations]), [f[0] for f in flat])


def test_prune_rejects_large_fraction(graph):
    with pytest.raises(ConfigurationError):
        prune_defense(graph, 0.6)


def test_prune_zero_feature_has_zero_similarity():
    """Feature de norme nulle → similarité 0"""
    rng = np.random.default_rng(5)
    features = {'paper': rng.standard_normal((4, 3)), 'author': np.zeros((4, 3)), 'subject': rng.standard_normal((4, 3))}
    graph = _random_graph(features, rng)
    assert np.all(edge_similarities(graph, 4, 0)[PA] == 0.0)


# =====================================================
# DÉTECTION D'ANOMALIES
# =====================================================

def test_od_fraction_zero_is_identity(graph):
    purified, report = od_defense(graph, DefenseConfig(od_drop_fraction=0.0, latent_dim=2))
    assert purified.edge_count() == graph.edge_count()
    assert all(not entry.dropped for entry in report.types)


def test_od_ranks_planted_outliers_first():
    """Trois auteurs hors du sous-espace des features: ce sont eux qui sont isolés"""
    rng = np.random.default_rng(6)
    authors = rng.standard_normal((300, 2)) @ rng.standard_normal((2, 16)) + 0.01 * rng.standard_normal((300, 16))
    outliers = np.array([10, 150, 299])
    directions = rng.standard_normal((3, 16))
    authors[outliers] += 25.0 * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    features = {'paper': rng.standard_normal((50, 4)), 'author': authors, 'subject': rng.standard_normal((40, 4))}
    graph = _random_graph(features, rng)

    config = DefenseConfig(od_drop_fraction=0.01, latent_dim=2, od_epochs=200)
    purified, report = od_defense(graph, config, seed=0)
    assert report.by_type('author').dropped == outliers.tolist()
    assert all(purified.degree(AS, v) == 0 for v in outliers)
    assert purified.node_counts == graph.node_counts


def test_od_skips_types_smaller_than_latent_dim(graph):
    """Type avec moins de nœuds que la dimension latente: note et aucun retrait"""
    purified, report = od_defense(graph, DefenseConfig(latent_dim=8, od_drop_fraction=0.5))
    assert all(entry.note for entry in report.types)
    assert purified.edge_count() == graph.edge_count()


def test_apply_defense_dispatch(graph, roles):
    """Nom inconnu → ConfigurationError; l'élagage conserve les étiquettes"""
    outcome = apply_defense('prune', graph, TINY_LABELS, roles)
    assert outcome.labels.tolist() == TINY_LABELS
    assert outcome.report.defense == 'prune'
    with pytest.raises(ConfigurationError):
        apply_defense('dropout', graph, TINY_LABELS, roles)
