"""
Sauvegarde et chargement des artefacts d'une expérience (JSON et CSV)
"""
import json
import logging
from pathlib import Path
from typing import Any, Optional, Tuple, Type, TypeVar, Union

import pandas as pd
from pydantic import BaseModel

from src.candidates import CandidatePool
from src.exceptions import ConfigurationError
from src.heterograph import (
    AttackTargets,
    GraphDelta,
    HeteroGraph,
    SchemaRoles,
    graph_from_document,
    graph_to_document,
)
from src.refine import AffineRefiner
from src.surrogate import RelationalClassifier
from src.trojan import TrojanGenerator

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ReportT = TypeVar('ReportT', bound=BaseModel)


def save_json(payload: Any, path: PathLike) -> Path:
    """Écrit un document JSON (clés triées, sortie stable d'une exécution à l'autre)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')
    return path


def load_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"❌ Lecture impossible de {path}: {e}")
        raise ConfigurationError(f"Artefact illisible: {path}") from e


# --- graphe ---

def save_graph(graph: HeteroGraph, path: PathLike, roles: Optional[SchemaRoles] = None) -> Path:
    return save_json(graph_to_document(graph, roles), path)


def load_graph(path: PathLike) -> Tuple[HeteroGraph, Optional[SchemaRoles]]:
    return graph_from_document(load_json(path))


# --- modèles ---

def save_model(model: RelationalClassifier, path: PathLike) -> Path:
    return save_json(model.to_payload(), path)


def load_model(path: PathLike) -> RelationalClassifier:
    return RelationalClassifier.from_payload(load_json(path))


def save_generator(generator: TrojanGenerator, path: PathLike, seed: Optional[int] = None,
                   lambda_div: Optional[float] = None) -> Path:
    return save_json(generator.to_payload(seed, lambda_div), path)


def load_generator(path: PathLike) -> TrojanGenerator:
    return TrojanGenerator.from_payload(load_json(path))


def save_refiner(refiner: AffineRefiner, path: PathLike) -> Path:
    return save_json(refiner.to_payload(), path)


def load_refiner(path: PathLike) -> AffineRefiner:
    return AffineRefiner.from_payload(load_json(path))


# --- pools, deltas, cibles ---

def save_pool(pool: CandidatePool, path: PathLike) -> Path:
    return save_json(pool.to_dict(), path)


def load_pool(path: PathLike) -> CandidatePool:
    return CandidatePool.from_dict(load_json(path))


def save_delta(delta: GraphDelta, path: PathLike) -> Path:
    return save_json(delta.to_dict(), path)


def load_delta(path: PathLike) -> GraphDelta:
    return GraphDelta.from_dict(load_json(path))


def save_targets(targets: AttackTargets, path: PathLike) -> Path:
    return save_json(targets.to_dict(), path)


def load_targets(path: PathLike, roles: SchemaRoles) -> AttackTargets:
    return AttackTargets.from_dict(load_json(path), roles)


# --- rapports et tableaux ---

def save_report(report: BaseModel, path: PathLike) -> Path:
    """Rapport pydantic en JSON (les infinis sont écrits comme constantes JSON)"""
    data = json.loads(report.model_dump_json())
    return save_json(data, path)


def load_report(path: PathLike, model: Type[ReportT]) -> ReportT:
    return model.model_validate(load_json(path))


def save_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.10g')
    return path


def load_frame(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Tableau introuvable: {path}")
    return pd.read_csv(path)


def artifact_exists(directory: PathLike, *names: str) -> bool:
    directory = Path(directory)
    return all((directory / name).exists() for name in names)

