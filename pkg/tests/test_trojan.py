"""
Tests du générateur de triggers: AdaIN, top-k différentiable, masquage, attention et diversité
"""
import logging

import numpy as np
import pytest

from config.settings import TOPK_RESIDUAL_TOL
from src import diffmath as dm
from src.candidates import AuxPool, CandidatePool
from src.exceptions import ConfigurationError
from src.heterograph import apply_delta
from src.schemas import TrojanConfig
from src.trojan import (
    AdaINStats,
    TriggerStreams,
    TrojanGenerator,
    adain,
    attention_scores,
    diversity_loss,
    draw_mask,
    hard_topk,
    soft_topk,
    solve_shift,
    topk_select,
    topk_vjp,
)

CONFIG = TrojanConfig(hidden_dim=8, heads=2, head_dim=4, noise_dim=3, triggers_per_victim=2)


@pytest.fixture
def pool():
    members = np.array([0, 1, 2])
    return CandidatePool(1, 'saliency', {'subject': AuxPool('subject', members, members, np.zeros(3), 2, 3)})


@pytest.fixture
def generator(graph, roles):
    return TrojanGenerator.for_graph(graph, roles, config=CONFIG, rng=np.random.default_rng(5))


# =====================================================
# ADAIN
# =====================================================

def test_adain_matches_clean_statistics():
    """Le lot normalisé a la moyenne et l'écart-type des déclencheurs propres"""
    rng = np.random.default_rng(0)
    clean = rng.normal(3.0, 2.0, size=(200, 4))
    stats = AdaINStats.from_features(clean)
    out = adain(rng.standard_normal((50, 4)) * 10 - 7, stats).value
    assert np.allclose(out.mean(axis=0), stats.mu, atol=1e-8)
    assert np.allclose(out.std(axis=0), stats.sigma, rtol=1e-6)


def test_adain_single_row_returns_clean_mean(caplog):
    """Lot d'une ligne: sortie = μ_clean, avec avertissement"""
    stats = AdaINStats(np.array([1.0, -2.0]), np.array([0.5, 0.5]))
    out = adain(np.array([[4.0, 4.0]]), stats).value
    assert np.allclose(out, [[1.0, -2.0]])
    assert "une seule ligne" in caplog.text


def test_adain_gradient():
    """Adjoint d'AdaIN = différences finies"""
    stats = AdaINStats(np.array([0.5, 1.0, -1.0]), np.array([1.0, 2.0, 0.5]))
    weights = np.arange(12.0).reshape(4, 3)
    fn = lambda x: dm.sum(dm.mul(adain(x, stats), weights))
    assert dm.grad_check(fn, np.random.default_rng(1).standard_normal((4, 3))) < 1e-5


def test_adain_requires_population():
    with pytest.raises(ConfigurationError):
        AdaINStats.from_features(np.zeros((0, 3)))


# =====================================================
# TOP-K
# =====================================================

def test_soft_topk_sums_to_k():
    """Σ σ(x_i + t) = k et chaque valeur est dans ]0, 1["""
    x = np.random.default_rng(2).standard_normal(8)
    f = soft_topk(x, 3)
    assert f.sum() == pytest.approx(3.0, abs=1e-9)
    assert np.all((f > 0) & (f < 1))
    assert solve_shift(x, 3).residual < 1e-9


def test_topk_vjp_matches_finite_differences():
    """VJP implicite = différences finies de ⟨r, f(x)⟩"""
    rng = np.random.default_rng(3)
    x, r = rng.standard_normal(6), rng.standard_normal(6)
    analytic = topk_vjp(x, 2, r)
    step = 1e-6
    numeric = np.zeros(6)
    for i in range(6):
        plus, minus = x.copy(), x.copy()
        plus[i] += step
        minus[i] -= step
        numeric[i] = (r @ soft_topk(plus, 2) - r @ soft_topk(minus, 2)) / (2 * step)
    assert np.allclose(analytic, numeric, atol=1e-5)


def test_topk_vjp_is_shift_invariant():
    """Un adjoint constant donne un gradient nul (Σ f = k fixé)"""
    x = np.random.default_rng(4).standard_normal(5)
    assert np.allclose(topk_vjp(x, 2, np.ones(5)), 0.0, atol=1e-12)


def test_masked_entries_get_zero_gradient():
    """Entrées masquées: valeur et gradient nuls"""
    x = np.array([0.3, -np.inf, 1.2, 0.1])
    assert soft_topk(x, 2)[1] == 0.0
    assert topk_vjp(x, 2, np.array([1.0, 5.0, -1.0, 2.0]))[1] == 0.0


def test_hard_topk_breaks_ties_by_smallest_index():
    assert hard_topk(np.array([1.0, 1.0, 0.0]), 1).tolist() == [1.0, 0.0, 0.0]
    assert hard_topk(np.array([0.0, 2.0, -np.inf, 1.0]), 2).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_topk_select_respects_mask_and_budget():
    """Exactement k sélections par ligne, jamais sur une entrée masquée"""
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((4, 6))
    mask = np.zeros((4, 6), dtype=bool)
    mask[:, 0] = True
    logits[:, 0] = 100.0
    selection = topk_select(logits, 2, 0.5, rng, 'train', mask).value
    assert np.all(selection.sum(axis=1) == 2)
    assert np.all(selection[:, 0] == 0)


def test_topk_select_infer_is_deterministic():
    """Mode inférence: top-k des logits, sans bruit"""
    logits = np.array([[0.1, 0.9, 0.5, 0.2]])
    selection = topk_select(logits, 2, 10.0, None, 'infer').value
    assert selection.tolist() == [[0.0, 1.0, 1.0, 0.0]]


def test_topk_select_straight_through_gradient():
    """Gradient droit-à-travers = VJP de la relaxation sur chaque ligne"""
    logits = dm.Tensor(np.array([[0.1, 0.9, 0.5, 0.2]]), requires_grad=True)
    weights = np.array([[1.0, -1.0, 2.0, 0.5]])
    with dm.Tape() as tape:
        loss = dm.sum(dm.mul(topk_select(logits, 2, 0.0, None, 'infer'), weights))
    grad, = tape.gradient(loss, [logits])
    assert np.allclose(grad[0], topk_vjp(logits.value[0], 2, weights[0]))


def test_topk_select_rejects_too_few_entries():
    """Moins de k entrées libres → ConfigurationError"""
    with pytest.raises(ConfigurationError):
        topk_select(np.zeros((1, 3)), 2, 0.0, None, 'infer', mask=np.array([[True, True, False]]))


def test_draw_mask_keeps_k_free_entries():
    """Chaque ligne garde au moins k entrées non masquées"""
    mask = draw_mask((50, 5), 0.9, 2, np.random.default_rng(6))
    assert np.all((~mask).sum(axis=1) >= 2)
    assert not draw_mask((3, 4), 0.0, 2, np.random.default_rng(6)).any()
    with pytest.raises(ConfigurationError):
        draw_mask((2, 3), 1.0, 1, np.random.default_rng(6))


# =====================================================
# ATTENTION ET DIVERSITÉ
# =====================================================

def test_attention_scores_are_bounded():
    """|l(i, j)| ≤ 1/√d_m (cosinus moyennés sur les têtes)"""
    rng = np.random.default_rng(7)
    scores = attention_scores(dm.Tensor(rng.standard_normal((3, 8))), dm.Tensor(rng.standard_normal((5, 8))), 2, 4)
    assert scores.shape == (3, 5)
    assert np.all(np.abs(scores.value) <= 0.5 + 1e-12)
    same = dm.Tensor(np.ones((1, 8)))
    assert attention_scores(same, same, 2, 4).item() == pytest.approx(0.5)


def test_diversity_loss_reference_values():
    """Motifs identiques → 1 − τ; motifs disjoints → 0; lot d'un seul trigger → 0"""
    identical = dm.Tensor(np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]]))
    disjoint = dm.Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    assert diversity_loss({'a': identical}, 0.5).item() == pytest.approx(0.5)
    assert diversity_loss({'a': disjoint}, 0.5).item() == pytest.approx(0.0)
    assert diversity_loss({'a': identical, 'b': disjoint}, 0.5).item() == pytest.approx(0.25)
    assert diversity_loss({'a': dm.Tensor(np.ones((1, 3)))}, 0.5).item() == 0.0


# =====================================================
# GÉNÉRATEUR
# =====================================================

def test_generate_produces_valid_delta(graph, roles, pool, generator):
    """Chaque victime reçoit `triggers_per_victim` nœuds, chacun avec K liens auxiliaires"""
    stats = AdaINStats.from_features(graph.features('author'))
    batch = generator.generate([2, 3], graph, roles, pool, stats, TriggerStreams.from_seed(0), mode='infer')
    assert batch.size == 4
    assert batch.victims.tolist() == [2, 2, 3, 3]
    assert batch.features.shape == (4, 3)
    assert np.all(batch.selection_arrays()['subject'].sum(axis=1) == 2)

    delta = batch.to_delta(graph, pool)
    poisoned = apply_delta(graph, delta, 'paper', budgets=pool.budgets, allowed=pool.allowed)
    assert poisoned.num_nodes('author') == 9


def test_generate_is_reproducible(graph, roles, pool, generator):
    """Même graine → mêmes features et mêmes sélections"""
    stats = AdaINStats.from_features(graph.features('author'))
    runs = [generator.generate([1, 4], graph, roles, pool, stats, TriggerStreams.from_seed(11), mode='train')
            for _ in range(2)]
    assert np.array_equal(runs[0].features.value, runs[1].features.value)
    assert np.array_equal(runs[0].selection_arrays()['subject'], runs[1].selection_arrays()['subject'])


def test_generate_requires_stats_with_adain(graph, roles, pool, generator):
    with pytest.raises(ConfigurationError):
        generator.generate([2], graph, roles, pool, None, TriggerStreams.from_seed(0))


def test_generator_parameters_receive_gradient(graph, roles, pool, generator):
    """La sélection et les features propagent un gradient vers θ_g"""
    stats = AdaINStats.from_features(graph.features('author'))
    weights = np.random.default_rng(8).standard_normal((4, 3))
    with dm.Tape() as tape:
        batch = generator.generate([2, 3], graph, roles, pool, stats, TriggerStreams.from_seed(0))
        loss = dm.add(dm.sum(dm.mul(batch.selections['subject'], weights)),
                      dm.sum(dm.mul(batch.features, weights)))
    grads = tape.gradient(loss, generator.params)
    assert np.abs(grads['query.out.W']).sum() > 0
    assert np.abs(grads['feat.out.W']).sum() > 0


def test_generator_payload_round_trip(graph, roles, pool, generator):
    """Générateur rechargé: mêmes triggers en mode inférence"""
    restored = TrojanGenerator.from_payload(generator.to_payload(seed=0, lambda_div=1.0))
    stats = AdaINStats.from_features(graph.features('author'))
    first = generator.generate([2], graph, roles, pool, stats, TriggerStreams.from_seed(1), mode='infer')
    second = restored.generate([2], graph, roles, pool, stats, TriggerStreams.from_seed(1), mode='infer')
    assert np.array_equal(first.features.value, second.features.value)
    assert restored.config == generator.config


def test_solve_shift_on_many_inputs():
    """1 000 vecteurs aléatoires: résidu de la contrainte ≤ 1e-8, top-k dur = tri par argsort"""
    rng = np.random.default_rng(12)
    for _ in range(1000):
        size = int(rng.integers(2, 12))
        k = int(rng.integers(1, size))
        x = rng.standard_normal(size) * rng.uniform(0.1, 5.0)
        assert solve_shift(x, k).residual <= 1e-8
        expected = np.zeros(size)
        expected[np.argsort(-x, kind='stable')[:k]] = 1.0
        assert np.array_equal(hard_topk(x, k), expected)


def test_solve_shift_warns_above_residual_tolerance(monkeypatch, caplog):
    """Bissection grossière → avertissement sur le résidu; précision par défaut → silence"""
    x = np.linspace(-3.0, 3.0, 20)
    with caplog.at_level(logging.WARNING, logger='src.trojan'):
        assert solve_shift(x, 5).residual <= TOPK_RESIDUAL_TOL
    assert not caplog.records

    monkeypatch.setattr('src.trojan.TOPK_RESIDUAL_TOL', 0.0)
    with caplog.at_level(logging.WARNING, logger='src.trojan'):
        state = solve_shift(x, 5, xtol=0.5)
    assert state.residual > 0.0
    assert any('résidu' in r.getMessage() for r in caplog.records)
