"""
Raffinement post-génératif: transformation affine inversible entraînée contre MMD + perte d'attaque
"""
import logging
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist

from config.settings import BANDWIDTH_MULTIPLIERS, CHECKPOINT_FORMAT_VERSION
from src import diffmath as dm
from src.candidates import CandidatePool
from src.diffmath import AdamW, ParameterSet, Tape, Tensor
from src.exceptions import ConfigurationError, NumericFault, SchemaError, TrainingDivergence
from src.heterograph import HeteroGraph, SchemaRoles, apply_delta
from src.schemas import RefineConfig
from src.surrogate import RelationalClassifier
from src.trojan import TriggerBatch

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['step', 'L_MMD', 'L_atk_aff', 'condition_estimate']


def median_bandwidths(reference: np.ndarray, multipliers: Sequence[float] = BANDWIDTH_MULTIPLIERS) -> List[float]:
    """Heuristique de la médiane: γ = médiane des distances deux à deux × multiplicateurs"""
    reference = np.asarray(reference, dtype=np.float64)
    distances = pdist(reference) if reference.shape[0] > 1 else np.zeros(0)
    median = float(np.median(distances)) if distances.size else 0.0
    if median <= 0.0:
        logger.warning("⚠️ Distance médiane nulle: largeur de bande de référence fixée à 1")
        median = 1.0
    return [median * m for m in multipliers]


def mmd(x: Union[Tensor, np.ndarray], y: Union[Tensor, np.ndarray], bandwidths: Sequence[float]) -> Tensor:
    """
    MMD² biaisée (V-statistique, diagonales incluses) avec un noyau RBF moyen sur les largeurs

    Raises:
        ConfigurationError: Si un des deux échantillons est vide
    """
    x, y = dm.as_tensor(x), dm.as_tensor(y)
    n, m = x.shape[0], y.shape[0]
    if n == 0 or m == 0:
        raise ConfigurationError("MMD sur un échantillon vide")
    k_xx = dm.scale(dm.sum(dm.gaussian_rbf(x, x, bandwidths)), 1.0 / (n * n))
    k_yy = dm.scale(dm.sum(dm.gaussian_rbf(y, y, bandwidths)), 1.0 / (m * m))
    k_xy = dm.scale(dm.sum(dm.gaussian_rbf(x, y, bandwidths)), -2.0 / (n * m))
    return dm.add(dm.add(k_xx, k_yy), k_xy)


class AffineRefiner:
    """x_aff = x̂ Wᵀ + b, W initialisée à l'identité et b à zéro (aucune non-linéarité)"""

    def __init__(self, dim: int, bandwidths: Optional[Sequence[float]] = None,
                 config: Optional[RefineConfig] = None, params: Optional[ParameterSet] = None):
        self.dim = int(dim)
        self.config = config or RefineConfig()
        self.bandwidths = list(bandwidths) if bandwidths is not None else None
        self.params = params if params is not None else ParameterSet({'W': np.eye(dim), 'b': np.zeros(dim)})

    def affine(self, x_hat: Union[Tensor, np.ndarray], params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        p = params if params is not None else self.params
        x_hat = dm.as_tensor(x_hat)
        if x_hat.ndim != 2 or x_hat.shape[1] != self.dim:
            raise SchemaError(f"Raffinement: features {x_hat.shape} pour une largeur {self.dim}")
        return dm.add(dm.matmul(x_hat, dm.transpose(p['W'])), p['b'])

    def transform(self, x_hat: np.ndarray) -> np.ndarray:
        return self.affine(x_hat, self.params.frozen()).numpy()

    def condition_estimate(self) -> float:
        """Rapport des valeurs singulières extrêmes de W"""
        return float(np.linalg.cond(self.params['W'].value))

    def to_payload(self) -> Dict[str, Any]:
        return {
            'format_version': CHECKPOINT_FORMAT_VERSION,
            'kind': 'affine_refiner',
            'dim': self.dim,
            'bandwidths': self.bandwidths,
            'config': self.config.model_dump(),
            'params': self.params.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "AffineRefiner":
        if payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(f"Version de checkpoint non supportée: {payload.get('format_version')}")
        return cls(payload['dim'], payload['bandwidths'], RefineConfig(**payload['config']),
                   ParameterSet.from_payload(payload['params']))


def affine(refiner: AffineRefiner, x_hat: Union[Tensor, np.ndarray]) -> Tensor:
    return refiner.affine(x_hat)


def attack_alignment_loss(surrogate: RelationalClassifier, graph: HeteroGraph, roles: SchemaRoles,
                          pool: CandidatePool, batch: TriggerBatch, x_aff: Tensor,
                          poisoned_graph: Optional[HeteroGraph] = None) -> Tensor:
    """
    Σ_{v ∈ V^(p)} ℓ(f_s(G̃(x_aff), v), y_t), substitut gelé: seuls W et b reçoivent un gradient

    Raises:
        ConfigurationError: Si le lot ne contient aucune victime
    """
    if batch.size == 0:
        raise ConfigurationError("Aucune victime empoisonnée pour la perte d'alignement")
    if poisoned_graph is None:
        delta = batch.to_delta(graph, pool, x_aff.value)
        poisoned_graph = apply_delta(graph, delta, roles.primary_type, pool.budgets, pool.allowed)
    logits = surrogate.forward(
        poisoned_graph,
        features={roles.trigger_type: batch.trigger_features(graph, x_aff)},
        params=surrogate.params.frozen(),
    )
    victims = np.unique(batch.victims)
    return dm.cross_entropy(logits, np.full(victims.size, roles.target_class), rows=victims, reduction='sum')


def run_refinement(refiner: AffineRefiner, batch: TriggerBatch, graph: HeteroGraph, roles: SchemaRoles,
                   pool: CandidatePool, surrogate: RelationalClassifier,
                   steps: Optional[int] = None) -> Tuple[AffineRefiner, pd.DataFrame]:
    """
    Optimise W, b sur L = L_MMD + L_atk-aff (générateur et substitut gelés)

    Args:
        refiner: Transformation initiale (modifiée sur place)
        batch: Triggers générés pour les victimes d'entraînement
        graph: Graphe propre
        roles: Rôles du schéma
        pool: Pools de candidats
        surrogate: Substitut issu de la phase bi-niveau
        steps: Budget de pas (par défaut celui de la configuration)

    Returns:
        Tuple[AffineRefiner, pd.DataFrame]: Transformation raffinée et trace
        (step, L_MMD, L_atk_aff, condition_estimate)

    Raises:
        TrainingDivergence: Perte non finie, avec instantané
    """
    config = refiner.config
    steps = config.steps if steps is None else steps
    x_hat = dm.constant(batch.features.numpy())
    clean = graph.features(roles.trigger_type)
    reference = clean if config.mmd_reference == 'clean' else x_hat.value
    if refiner.bandwidths is None:
        refiner.bandwidths = median_bandwidths(clean, config.bandwidth_multipliers)

    # La structure ne dépend pas de x_aff: le graphe empoisonné est construit une fois
    poisoned = apply_delta(graph, batch.to_delta(graph, pool, x_hat.value), roles.primary_type,
                           pool.budgets, pool.allowed)
    optimizer = AdamW(refiner.params, lr=config.learning_rate, weight_decay=0.0)
    rows: List[Dict[str, float]] = []

    def evaluate():
        x_aff = refiner.affine(x_hat)
        l_mmd = mmd(x_aff, reference, refiner.bandwidths)
        l_atk = attack_alignment_loss(surrogate, graph, roles, pool, batch, x_aff, poisoned)
        return dm.add(l_mmd, l_atk), l_mmd, l_atk

    logger.info(f"🔄 Raffinement affine: {steps} pas, référence MMD '{config.mmd_reference}'")
    for step in range(steps + 1):
        try:
            with Tape() as tape:
                total, l_mmd, l_atk = evaluate()
            condition = refiner.condition_estimate()
            rows.append({'step': step, 'L_MMD': l_mmd.item(), 'L_atk_aff': l_atk.item(),
                         'condition_estimate': condition})
            if condition > config.condition_warning:
                logger.warning(f"⚠️ Pas {step}: conditionnement de W = {condition:.3e}")
            if step == steps:
                break
            optimizer.step(tape.gradient(total, refiner.params))
        except NumericFault as e:
            snapshot = {'step': step, 'fault': str(e), 'last_trace': rows[-1] if rows else None,
                        'W': refiner.params['W'].value.tolist()}
            logger.error(f"❌ Divergence du raffinement au pas {step}: {e}")
            raise TrainingDivergence(f"Perte non finie au pas {step} du raffinement", snapshot) from e

    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    logger.info(f"✅ Raffinement terminé: L_MMD {rows[0]['L_MMD']:.4f} → {rows[-1]['L_MMD']:.4f}")
    return refiner, trace
