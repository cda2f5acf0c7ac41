"""
Métriques d'évaluation de l'attaque: ASR, CAD, score de diversité, agrégation sur les graines
"""
import logging
from itertools import combinations
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from config.settings import MIN_SEEDS, STD_DAGGER_THRESHOLD
from src.candidates import CandidatePool
from src.exceptions import ConfigurationError
from src.heterograph import GraphDelta, HeteroGraph
from src.surrogate import RelationalClassifier

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['asr', 'cad', 'diversity']


class EvalReport(BaseModel):
    """Rapport d'évaluation d'un essai (graine × classe cible × défense)"""
    seed: int
    target_class: int
    defense: str = 'none'
    asr: float = Field(..., ge=0, le=1)
    cad: float
    diversity: Optional[float] = Field(None, ge=0, le=2)
    clean_accuracy: float = Field(..., ge=0, le=1)
    backdoor_accuracy: float = Field(..., ge=0, le=1)
    n_poisoned_test: int = Field(..., gt=0)
    excluded_victims: int = 0
    per_class: Dict[str, float] = Field(default_factory=dict, description="Part des victimes prédites par classe")


def asr(model: RelationalClassifier, poisoned_graph: HeteroGraph, victims: Sequence[int], target_class: int,
        labels: Optional[np.ndarray] = None) -> float:
    """
    Taux de succès: part des victimes classées dans la classe cible

    Les victimes dont l'étiquette réelle est déjà y_t sont exclues si `labels` est fourni.

    Raises:
        ConfigurationError: Ensemble de victimes vide
    """
    victims = np.asarray(victims, dtype=np.int64)
    if labels is not None:
        keep = np.asarray(labels)[victims] != target_class
        if not keep.all():
            logger.warning(f"⚠️ {int((~keep).sum())} victime(s) déjà de classe {target_class} exclue(s) de l'ASR")
        victims = victims[keep]
    if victims.size == 0:
        raise ConfigurationError("ASR sur un ensemble de victimes vide")
    predictions = model.predict(poisoned_graph)
    return float(np.mean(predictions[victims] == target_class))


def cad(clean_accuracy: float, backdoor_accuracy: float, clean_nodes: Optional[Sequence[int]] = None,
        backdoor_nodes: Optional[Sequence[int]] = None) -> float:
    """
    CAD = Acc_{f_c}(propre) − Acc_{f_b}(propre), signe conservé

    Raises:
        ConfigurationError: Si les deux précisions ne portent pas sur le même découpage
    """
    if clean_nodes is not None and backdoor_nodes is not None \
            and not np.array_equal(np.sort(np.asarray(clean_nodes)), np.sort(np.asarray(backdoor_nodes))):
        raise ConfigurationError("CAD: précisions mesurées sur des ensembles de test différents")
    return float(clean_accuracy) - float(backdoor_accuracy)


def _cosine_dissimilarity(patterns: np.ndarray) -> float:
    norms = np.linalg.norm(patterns, axis=1)
    values = [1.0 - float(patterns[i] @ patterns[j]) / (norms[i] * norms[j])
              for i, j in combinations(range(patterns.shape[0]), 2)]
    return float(np.mean(values))


def diversity_score(patterns: Mapping[str, np.ndarray]) -> float:
    """
    Moyenne sur les types auxiliaires de la moyenne, sur les paires i<j, de 1 − cos(p_i, p_j)

    Args:
        patterns: Par type auxiliaire, matrice binaire (triggers × candidats)

    Raises:
        ConfigurationError: Aucun type ne compte deux motifs non nuls
    """
    per_type = []
    for aux_type, matrix in patterns.items():
        matrix = np.asarray(matrix, dtype=np.float64)
        nonzero = np.any(matrix != 0, axis=1)
        if not nonzero.all():
            logger.warning(f"⚠️ {int((~nonzero).sum())} motif(s) nul(s) exclu(s) pour {aux_type}")
        matrix = matrix[nonzero]
        if matrix.shape[0] < 2:
            logger.warning(f"⚠️ Moins de deux motifs pour {aux_type}: type ignoré")
            continue
        per_type.append(_cosine_dissimilarity(matrix))
    if not per_type:
        raise ConfigurationError("Score de diversité: il faut au moins deux triggers")
    return float(np.mean(per_type))


def connection_patterns(delta: GraphDelta, pool: CandidatePool) -> Dict[str, np.ndarray]:
    """Motifs de connexion binaires p_{i,t} (triggers × membres du pool C*_t)"""
    patterns = {}
    for aux_type, aux_pool in pool.pools.items():
        position = {int(u): j for j, u in enumerate(aux_pool.members)}
        matrix = np.zeros((delta.size, aux_pool.members.size))
        for row, (_, targets) in enumerate(sorted(delta.aux_links(aux_type).items())):
            for u in targets:
                matrix[row, position[int(u)]] = 1.0
        patterns[aux_type] = matrix
    return patterns


def prediction_breakdown(model: RelationalClassifier, graph: HeteroGraph, victims: Sequence[int],
                         num_classes: int) -> Dict[str, float]:
    predictions = model.predict(graph)[np.asarray(victims, dtype=np.int64)]
    counts = np.bincount(predictions, minlength=num_classes)
    return {str(c): float(counts[c] / max(len(victims), 1)) for c in range(num_classes)}


def summarize(reports: Iterable[EvalReport]) -> pd.DataFrame:
    """
    Moyenne ± écart-type par (classe cible, défense), avec marqueur † si std > 0.1

    Returns:
        pd.DataFrame: Une ligne par (target_class, defense)
    """
    frame = pd.DataFrame([r.model_dump(exclude={'per_class'}) for r in reports])
    if frame.empty:
        raise ConfigurationError("Aucun rapport à agréger")
    rows: List[Dict] = []
    for (target, defense), group in frame.groupby(['target_class', 'defense'], sort=True):
        seeds = group['seed'].nunique()
        if seeds < MIN_SEEDS:
            logger.warning(f"⚠️ y_t={target}, défense {defense}: {seeds} graine(s) < {MIN_SEEDS}")
        row = {'target_class': int(target), 'defense': defense, 'n_seeds': int(seeds)}
        for column in METRIC_COLUMNS:
            values = group[column].dropna().astype(float)
            mean = float(values.mean()) if len(values) else float('nan')
            std = float(values.std(ddof=0)) if len(values) else float('nan')
            row[f'{column}_mean'] = mean
            row[f'{column}_std'] = std
            row[f'{column}_dagger'] = '†' if std > STD_DAGGER_THRESHOLD else ''
        rows.append(row)
    return pd.DataFrame(rows)
