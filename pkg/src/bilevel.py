"""
Optimisation bi-niveau alternée du substitut (niveau interne) et du générateur (niveau externe)
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config.settings import WEIGHT_DECAY
from src import diffmath as dm
from src.candidates import CandidatePool
from src.diffmath import AdamW, Tape, Tensor
from src.exceptions import ConfigurationError, NumericFault, SchemaError, TrainingDivergence
from src.heterograph import AttackTargets, HeteroGraph, SchemaRoles, apply_delta
from src.schemas import BilevelConfig
from src.surrogate import RelationalClassifier
from src.trojan import AdaINStats, TriggerBatch, TriggerStreams, TrojanGenerator, diversity_loss

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['iter', 'L_s', 'L_g', 'L_div', 'train_asr']


@dataclass
class BilevelStreams:
    """Sous-flux aléatoires de la boucle bi-niveau"""
    triggers: TriggerStreams
    batch: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "BilevelStreams":
        trigger_seq, batch_seq = np.random.SeedSequence(seed).spawn(2)
        return cls(TriggerStreams.from_seed(int(trigger_seq.generate_state(1)[0])),
                   np.random.default_rng(batch_seq))


@dataclass
class BilevelResult:
    generator: TrojanGenerator
    surrogate: RelationalClassifier
    log: pd.DataFrame


def poison_graph(graph: HeteroGraph, roles: SchemaRoles, pool: CandidatePool, batch: TriggerBatch,
                 features: Optional[np.ndarray] = None) -> HeteroGraph:
    """Applique un lot de triggers au graphe propre (structure dure)"""
    delta = batch.to_delta(graph, pool, features)
    return apply_delta(graph, delta, roles.primary_type, pool.budgets, pool.allowed)


def inner_loss(surrogate: RelationalClassifier, graph: HeteroGraph, poisoned: HeteroGraph, labels: np.ndarray,
               targets: AttackTargets, target_class: int, params=None, require_poison: bool = True) -> Tensor:
    """
    L_s: entropie croisée (somme) sur le graphe empoisonné, étiquette y_t pour les victimes d'entraînement

    Args:
        surrogate: Substitut f_s
        graph: Graphe propre (référence de schéma)
        poisoned: Graphe empoisonné G̃
        labels: Étiquettes réelles des nœuds principaux
        targets: Découpage et victimes empoisonnées
        target_class: Classe cible y_t
        require_poison: Lever une erreur si aucune victime n'est empoisonnée

    Raises:
        ConfigurationError: Ensemble empoisonné vide (si require_poison)
    """
    if require_poison and len(targets.poisoned_train) == 0:
        raise ConfigurationError("Ensemble empoisonné d'entraînement vide")
    primary = surrogate.primary_type
    if poisoned.num_nodes(primary) != graph.num_nodes(primary):
        raise SchemaError("Le graphe empoisonné ne conserve pas les nœuds principaux")
    train = np.asarray(targets.split.train, dtype=np.int64)
    poisoned_labels = np.array(labels, dtype=np.int64)
    poisoned_labels[np.asarray(targets.poisoned_train, dtype=np.int64)] = target_class
    logits = surrogate.forward(poisoned, params=params)
    return dm.cross_entropy(logits, poisoned_labels[train], rows=train, reduction='sum')


def inner_update(surrogate: RelationalClassifier, optimizer: AdamW, graph: HeteroGraph, poisoned: HeteroGraph,
                 labels: np.ndarray, targets: AttackTargets, target_class: int, steps: int) -> List[float]:
    """
    N pas d'optimisation de θ_s sur L_s (générateur gelé)

    Returns:
        List[float]: Valeur de L_s avant chaque pas
    """
    losses = []
    for _ in range(steps):
        with Tape() as tape:
            loss = inner_loss(surrogate, graph, poisoned, labels, targets, target_class)
        optimizer.step(tape.gradient(loss, surrogate.params))
        losses.append(loss.item())
    return losses


def outer_loss(generator: TrojanGenerator, surrogate: RelationalClassifier, graph: HeteroGraph,
               roles: SchemaRoles, pool: CandidatePool, stats: Optional[AdaINStats], victims: np.ndarray,
               streams: TriggerStreams, lambda_div: float) -> Tuple[Tensor, Tensor, Tensor, TriggerBatch]:
    """
    L_g + λ_div·L_div sur Ĝ(θ_g), substitut gelé

    Les gradients atteignent θ_g par les features (AdaIN) et par les arêtes (top-k droit-à-travers).

    Returns:
        Tuple: (perte totale, L_g, L_div, lot de triggers)
    """
    batch = generator.generate(victims, graph, roles, pool, stats, streams, mode='train')
    outer_graph = poison_graph(graph, roles, pool, batch, batch.features.value)
    start = graph.num_nodes(roles.trigger_type)
    logits = surrogate.forward(
        outer_graph,
        features={roles.trigger_type: batch.trigger_features(graph)},
        soft=batch.soft_rows(start),
        params=surrogate.params.frozen(),
    )
    victims = np.asarray(victims, dtype=np.int64)
    attack = dm.cross_entropy(logits, np.full(victims.size, roles.target_class), rows=victims,
                              reduction='sum')
    if batch.size < 2:
        logger.warning("⚠️ Lot externe de moins de deux triggers: terme de diversité ignoré")
        div = dm.constant(np.asarray(0.0))
    else:
        div = diversity_loss(batch.selections, generator.config.margin)
    total = dm.add(attack, dm.scale(div, lambda_div)) if lambda_div else attack
    return total, attack, div, batch


def _train_asr(surrogate: RelationalClassifier, poisoned: HeteroGraph, victims: np.ndarray, target_class: int) -> float:
    if len(victims) == 0:
        return float('nan')
    predictions = surrogate.predict(poisoned)
    return float(np.mean(predictions[victims] == target_class))


def run_bilevel(graph: HeteroGraph, roles: SchemaRoles, pool: CandidatePool, targets: AttackTargets,
                config: BilevelConfig, generator: TrojanGenerator, surrogate: RelationalClassifier,
                stats: Optional[AdaINStats], streams: BilevelStreams,
                lambda_div: Optional[float] = None) -> BilevelResult:
    """
    Alterne N pas internes sur θ_s et un pas externe sur θ_g

    Args:
        graph: Graphe propre
        roles: Rôles du schéma
        pool: Pools de candidats
        targets: Découpage et victimes d'entraînement
        config: Configuration bi-niveau
        generator: Générateur initial (modifié sur place)
        surrogate: Substitut initial (modifié sur place)
        stats: Statistiques AdaIN
        streams: Sous-flux aléatoires
        lambda_div: Poids de diversité (par défaut celui de la configuration)

    Returns:
        BilevelResult: Générateur, substitut et journal (iter, L_s, L_g, L_div, train_asr)

    Raises:
        TrainingDivergence: Perte non finie, avec instantané de diagnostic
    """
    lambda_div = config.lambda_div if lambda_div is None else lambda_div
    train = np.asarray(targets.split.train, dtype=np.int64)
    victims_train = np.asarray(targets.poisoned_train, dtype=np.int64)
    if victims_train.size == 0:
        raise ConfigurationError("Ensemble empoisonné d'entraînement vide")

    surrogate_opt = AdamW(surrogate.params, lr=config.surrogate_lr, weight_decay=WEIGHT_DECAY)
    generator_opt = AdamW(generator.params, lr=config.generator_lr, weight_decay=WEIGHT_DECAY)
    rows: List[Dict[str, Any]] = []

    logger.info(f"🔄 Optimisation bi-niveau: {config.outer_iterations} itérations externes, N={config.inner_steps}")
    for iteration in range(config.outer_iterations):
        phase = 'interne'
        try:
            inner_batch = generator.generate(victims_train, graph, roles, pool, stats, streams.triggers,
                                             mode='train', params=generator.params.frozen())
            poisoned = poison_graph(graph, roles, pool, inner_batch)
            losses = inner_update(surrogate, surrogate_opt, graph, poisoned, roles.labels, targets,
                                  roles.target_class, config.inner_steps)

            phase = 'externe'
            size = min(config.batch_size, train.size)
            outer_victims = np.sort(streams.batch.choice(train, size=size, replace=False))
            with Tape() as tape:
                total, attack, div, _ = outer_loss(generator, surrogate, graph, roles, pool, stats,
                                                   outer_victims, streams.triggers, lambda_div)
            generator_opt.step(tape.gradient(total, generator.params))
        except NumericFault as e:
            snapshot = {'iteration': iteration, 'phase': phase, 'fault': str(e),
                        'last_log': rows[-1] if rows else None}
            logger.error(f"❌ Divergence à l'itération {iteration} (phase {phase}): {e}")
            raise TrainingDivergence(f"Perte non finie à l'itération {iteration} ({phase})", snapshot) from e

        row = {
            'iter': iteration,
            'L_s': losses[-1],
            'L_g': attack.item(),
            'L_div': div.item(),
            'train_asr': _train_asr(surrogate, poisoned, victims_train, roles.target_class),
        }
        rows.append(row)
        if iteration % 10 == 0 or iteration == config.outer_iterations - 1:
            logger.info(f"Itération {iteration}: L_s={row['L_s']:.4f} L_g={row['L_g']:.4f} "
                        f"L_div={row['L_div']:.4f} ASR(train)={row['train_asr']:.3f}")

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    logger.info("✅ Optimisation bi-niveau terminée")
    return BilevelResult(generator, surrogate, log)
