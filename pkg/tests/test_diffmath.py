"""
Tests du moteur de différentiation: adjoints, normalisations et optimiseur
"""
import numpy as np
import pytest
import scipy.sparse as sp

from src import diffmath as dm
from src.exceptions import NumericFault, ShapeError

GRAD_TOL = 1e-5


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_gelu_matches_reference_values():
    """GELU(0)=0, GELU(x) ≈ x pour x grand"""
    out = dm.gelu(np.array([0.0, 10.0, -10.0])).value
    assert out[0] == 0.0
    assert out[1] == pytest.approx(10.0)
    assert abs(out[2]) < 1e-10


@pytest.mark.parametrize('fn', [
    lambda x: dm.sum(dm.gelu(x)),
    lambda x: dm.sum(dm.sigmoid(x)),
    lambda x: dm.sum(dm.mul(dm.layer_norm(x), np.arange(12.0).reshape(3, 4))),
    lambda x: dm.sum(dm.mul(dm.l2_normalize(x), np.arange(12.0).reshape(3, 4))),
    lambda x: dm.sum(dm.mul(dm.softmax(x), np.arange(12.0).reshape(3, 4))),
    lambda x: dm.cross_entropy(x, [0, 3, 1]),
    lambda x: dm.cross_entropy(x, [2], rows=[1], reduction='mean'),
    lambda x: dm.sum(dm.matmul(x, dm.transpose(x))),
    lambda x: dm.sum(dm.mean_rows(dm.take_rows(x, [0, 0, 2]))),
    lambda x: dm.sum(dm.slice_cols(dm.concat([x, x], axis=1), 2, 6)),
    lambda x: dm.sum(dm.gaussian_rbf(x, dm.scale(x, 0.5), [0.5, 1.0])),
])
def test_gradients_match_finite_differences(fn, rng):
    """Adjoint analytique = différences finies centrées"""
    point = rng.standard_normal((3, 4))
    assert dm.grad_check(fn, point) < GRAD_TOL


def test_mean_over_neighbors_gradient(rng):
    """L'agrégation moyenne est linéaire: gradient = opérateur transposé"""
    adjacency = sp.csr_matrix(np.array([[1, 1, 0], [0, 0, 0], [1, 0, 1]], dtype=float))
    weights = rng.standard_normal((3, 2))
    fn = lambda x: dm.sum(dm.mul(dm.mean_over_neighbors(adjacency, x), weights))
    assert dm.grad_check(fn, rng.standard_normal((3, 2))) < GRAD_TOL
    out = dm.mean_over_neighbors(adjacency, np.ones((3, 2))).value
    assert np.allclose(out[1], 0.0)
    assert np.allclose(out[0], 1.0)


def test_bias_broadcast_reduces_gradient():
    """Le gradient d'un biais diffusé est la somme sur les lignes"""
    x = dm.Tensor(np.ones((4, 3)))
    b = dm.Tensor(np.zeros(3), requires_grad=True)
    with dm.Tape() as tape:
        loss = dm.sum(dm.add(x, b))
    grad, = tape.gradient(loss, [b])
    assert np.allclose(grad, 4.0)


def test_layer_norm_output_is_standardized(rng):
    """Chaque ligne: moyenne 0 et variance ≈ 1"""
    y = dm.layer_norm(rng.standard_normal((5, 8)) * 3 + 2).value
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1.0, atol=1e-4)


def test_l2_normalize_rejects_zero_row():
    """Vecteur nul → NumericFault"""
    with pytest.raises(NumericFault):
        dm.l2_normalize(np.zeros((1, 3)))


def test_non_finite_values_are_rejected():
    """NaN dans une entrée ou une sortie → NumericFault"""
    with pytest.raises(NumericFault):
        dm.Tensor([np.nan])
    with pytest.raises(NumericFault):
        dm.div(dm.Tensor([1.0]), dm.Tensor([0.0]))


def test_shape_mismatch_is_reported():
    """Produit matriciel mal dimensionné → ShapeError"""
    with pytest.raises(ShapeError):
        dm.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        dm.cross_entropy(np.zeros((2, 3)), [0, 5])


def test_cross_entropy_uniform_logits():
    """Logits nuls: perte = n·log C"""
    loss = dm.cross_entropy(np.zeros((4, 3)), [0, 1, 2, 0])
    assert loss.item() == pytest.approx(4 * np.log(3))


def test_unused_parameters_get_zero_gradient():
    """Un paramètre absent du graphe de calcul reçoit un gradient nul"""
    params = dm.ParameterSet({'a': np.ones(2), 'b': np.ones(3)})
    with dm.Tape() as tape:
        loss = dm.sum(dm.scale(params['a'], 2.0))
    grads = tape.gradient(loss, params)
    assert np.allclose(grads['a'], 2.0)
    assert np.allclose(grads['b'], 0.0)


def test_frozen_parameters_do_not_accumulate():
    """La vue figée ne reçoit aucun adjoint"""
    params = dm.ParameterSet({'w': np.ones((2, 2))})
    frozen = params.frozen()
    x = dm.Tensor(np.ones((1, 2)), requires_grad=True)
    with dm.Tape() as tape:
        loss = dm.sum(dm.matmul(x, frozen['w']))
    assert len(tape.nodes) >= 1
    grad_x, grad_w = tape.gradient(loss, [x, frozen['w']])
    assert np.allclose(grad_x, 2.0)
    assert np.allclose(grad_w, 0.0)


def test_no_tape_records_nothing():
    """Hors d'une bande, aucune opération n'est enregistrée"""
    assert dm.active_tape() is None
    params = dm.ParameterSet({'w': np.ones(2)})
    dm.sum(params['w'])
    with dm.Tape() as tape:
        assert dm.active_tape() is tape
    assert dm.active_tape() is None


def test_clip_by_global_norm():
    """Norme globale ramenée au seuil, direction conservée"""
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    clipped = dm.clip_by_global_norm(grads, 1.0)
    assert clipped['a'][0] == pytest.approx(0.6)
    assert clipped['b'][0] == pytest.approx(0.8)
    assert dm.clip_by_global_norm(grads, 10.0)['a'][0] == 3.0


def test_adamw_first_step_moves_by_learning_rate():
    """Premier pas Adam: |Δθ| ≈ lr dans la direction opposée au gradient"""
    state = dm.AdamState()
    updated = dm.optimizer_step({'w': np.array([1.0, -1.0])}, {'w': np.array([0.5, -0.2])}, state,
                                lr=0.1, clip=None)
    assert np.allclose(updated['w'], [0.9, -0.9], atol=1e-6)
    assert state.step == 1


def test_adamw_weight_decay_is_decoupled():
    """Gradient nul: seule la décroissance découplée agit"""
    updated = dm.optimizer_step({'w': np.array([2.0])}, {'w': np.array([0.0])}, dm.AdamState(),
                                lr=0.1, weight_decay=0.5)
    assert updated['w'][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_rejects_non_finite_gradient():
    with pytest.raises(NumericFault):
        dm.optimizer_step({'w': np.ones(1)}, {'w': np.array([np.inf])}, dm.AdamState(), lr=0.1)


def test_adamw_minimizes_quadratic():
    """AdamW converge vers le minimum d'une forme quadratique"""
    params = dm.ParameterSet({'w': np.array([3.0, -2.0])})
    optimizer = dm.AdamW(params, lr=0.1)
    for _ in range(300):
        with dm.Tape() as tape:
            loss = dm.sum(dm.mul(params['w'], params['w']))
        optimizer.step(tape.gradient(loss, params))
    assert np.all(np.abs(params['w'].value) < 0.05)


def test_parameter_payload_round_trip():
    """Les paramètres sont restaurés avec leurs formes"""
    params = dm.ParameterSet({'w': np.arange(6.0).reshape(2, 3), 'b': np.zeros(3)})
    restored = dm.ParameterSet.from_payload(params.to_payload())
    assert restored.names() == ['w', 'b']
    assert np.array_equal(restored['w'].value, params['w'].value)
