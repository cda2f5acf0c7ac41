"""
Tests du jeu synthétique, du découpage, des victimes et de l'attaque naïve
"""
import numpy as np
import pytest

from conftest import small_spec
from src.defense import csd_defend
from src.exceptions import ConfigurationError
from src.heterograph import Relation, apply_delta
from src.synthetic import (
    build_targets,
    generate_synthetic,
    make_split,
    naive_feature,
    naive_inject,
    pareto_scale,
    poison_count,
    sample_degrees,
    select_victims,
)


# =====================================================
# GÉNÉRATION
# =====================================================

def test_generation_is_deterministic():
    """Même graine → graphe identique; graine différente → graphe différent"""
    first, roles = generate_synthetic(small_spec(), seed=3)
    second, _ = generate_synthetic(small_spec(), seed=3)
    other, _ = generate_synthetic(small_spec(), seed=4)
    assert first == second
    assert first != other
    assert roles.primary_type == 'paper'
    assert roles.trigger_type == 'author'


def test_generated_schema(synthetic):
    """3 types et 4 relations: condition d'hétérogénéité, une étiquette par article"""
    graph, roles = synthetic
    assert len(graph.node_types) + len(graph.relations) > 2
    assert graph.node_counts == {'paper': 60, 'author': 40, 'subject': 30}
    assert graph.feature_dim('paper') == 8
    assert roles.labels.shape == (60,)
    assert np.bincount(roles.labels).tolist() == [20, 20, 20]
    assert graph.auxiliary_types('author', 'paper') == ('subject',)


def test_self_relation_has_no_loops(synthetic):
    graph, _ = synthetic
    edges = graph.edges(Relation('paper', 'paper'))
    assert np.all(edges[:, 0] != edges[:, 1])


def test_degree_sample_matches_p90():
    """10 000 degrés: P90 empirique à ±10 % de la cible"""
    degrees = sample_degrees(10_000, 6, 1.5, np.random.default_rng(0))
    p90 = np.quantile(degrees, 0.9, method='inverted_cdf')
    assert abs(p90 - 6) <= 0.6
    assert degrees.min() >= 1


def test_pareto_scale_places_the_decile():
    """P(X > x_min · 0.1^(−1/α)) = 0.1 et ce seuil vaut cible − 0.5"""
    x_min = pareto_scale(6, 1.5)
    assert x_min * 0.1 ** (-1.0 / 1.5) == pytest.approx(5.5)


def test_degrees_are_capped():
    degrees = sample_degrees(500, 3, 0.8, np.random.default_rng(1), max_degree=4)
    assert degrees.max() <= 4
    with pytest.raises(ConfigurationError):
        sample_degrees(10, 5, 1.5, np.random.default_rng(1), max_degree=4)


def test_infeasible_degree_spec_raises():
    """P90 visé supérieur au nombre de destinations → ConfigurationError"""
    spec = small_spec().model_copy(update={'aux_degree_p90': 35})
    with pytest.raises(ConfigurationError):
        generate_synthetic(spec)


# =====================================================
# DÉCOUPAGE ET VICTIMES
# =====================================================

def test_split_is_disjoint_and_covering():
    """70 / 20 / 10 sur 100 nœuds, parts disjointes couvrant tout"""
    split = make_split(100, rng=np.random.default_rng(0))
    assert (len(split.train), len(split.test), len(split.val)) == (70, 20, 10)
    union = np.concatenate([split.train, split.test, split.val])
    assert np.array_equal(np.sort(union), np.arange(100))


def test_split_rejects_empty_part():
    with pytest.raises(ConfigurationError):
        make_split(3)


def test_poison_count():
    """⌊0.05 · n⌋, au moins un"""
    assert poison_count(100, 0.05) == 5
    assert poison_count(60, 0.05) == 3
    assert poison_count(10, 0.05) == 1


def test_victims_are_non_target(synthetic):
    """Victimes tirées parmi les nœuds non-cible de chaque part"""
    _, roles = synthetic
    split = make_split(60, rng=np.random.default_rng(0))
    targets = build_targets(split, roles, 0.05, np.random.default_rng(1))
    assert len(targets.poisoned_train) == 3
    assert np.all(np.isin(targets.poisoned_train, split.train))
    assert np.all(np.isin(targets.poisoned_test, split.test))
    assert np.all(roles.labels[np.concatenate([targets.poisoned_train, targets.poisoned_test])] != 0)


def test_select_victims_needs_enough_nodes():
    labels = np.array([0, 0, 1])
    with pytest.raises(ConfigurationError):
        select_victims(np.arange(3), labels, 0, 2, np.random.default_rng(0))


# =====================================================
# ATTAQUE NAÏVE
# =====================================================

def test_naive_injection(synthetic):
    """5 victimes → 5 déclencheurs de même feature, à plus de 8σ de la population"""
    graph, roles = synthetic
    victims = np.flatnonzero(roles.labels != 0)[:5]
    delta = naive_inject(graph, roles, victims, {'subject': 2}, rng=np.random.default_rng(0))
    assert delta.size == 5
    assert np.all(delta.new_features == delta.new_features[0])
    clean = graph.features('author')
    assert np.all(np.abs(delta.new_features[0] - clean.mean(axis=0)) >= 8 * clean.std(axis=0))
    assert np.allclose(delta.new_features[0], naive_feature(graph, 'author'))

    poisoned = apply_delta(graph, delta, 'paper', budgets={'subject': 2})
    assert poisoned.num_nodes('author') == 45
    assert delta.victims.tolist() == victims.tolist()


def test_csd_removes_naive_triggers(synthetic):
    """Attaque naïve → CSD isole les déclencheurs injectés"""
    graph, roles = synthetic
    victims = np.flatnonzero(roles.labels != 0)[:5]
    delta = naive_inject(graph, roles, victims, {'subject': 2}, rng=np.random.default_rng(0))
    poisoned = apply_delta(graph, delta, 'paper', budgets={'subject': 2})

    outcome = csd_defend(poisoned, roles.labels, roles)
    entry = outcome.report.by_type('author')
    assert entry.separation_ratio > 2.0
    assert entry.suspicious_count == 5
    assert all(outcome.graph.degree(Relation('author', 'subject'), t) == 0 for t in delta.new_trigger_ids)
    assert {r.node for r in outcome.report.rectified} >= set(victims.tolist())
