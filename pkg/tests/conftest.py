"""
Fixtures partagées des tests
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Ajouter le dossier parent au path pour les imports
sys.path.append(str(Path(__file__).parent.parent))

from src.heterograph import HeteroGraph, Relation, SchemaRoles  # noqa: E402
from src.schemas import DatasetSpec, ExperimentConfig, NodeTypeSpec  # noqa: E402
from src.synthetic import generate_synthetic  # noqa: E402

PA = Relation('paper', 'author')
AS = Relation('author', 'subject')
PS = Relation('paper', 'subject')


def tiny_graph() -> HeteroGraph:
    """6 articles, 5 auteurs, 4 sujets; chaque article cite un ou deux auteurs"""
    rng = np.random.default_rng(7)
    features = {
        'paper': rng.standard_normal((6, 4)),
        'author': rng.standard_normal((5, 3)),
        'subject': rng.standard_normal((4, 3)),
    }
    edges = {
        PA: [(0, 0), (0, 1), (1, 1), (2, 2), (3, 3), (4, 4), (5, 0)],
        AS: [(0, 0), (1, 1), (1, 2), (2, 2), (3, 3), (4, 0)],
        PS: [(0, 1), (2, 3), (4, 2)],
    }
    return HeteroGraph({'paper': 6, 'author': 5, 'subject': 4}, features, edges)


TINY_LABELS = [0, 0, 1, 1, 2, 2]


@pytest.fixture
def graph() -> HeteroGraph:
    return tiny_graph()


@pytest.fixture
def roles(graph) -> SchemaRoles:
    return SchemaRoles.derive(graph, 'paper', 'author', TINY_LABELS, target_class=0, num_classes=3)


def small_spec() -> DatasetSpec:
    return DatasetSpec(
        node_types={
            'paper': NodeTypeSpec(count=60, feature_dim=8),
            'author': NodeTypeSpec(count=40, feature_dim=6),
            'subject': NodeTypeSpec(count=30, feature_dim=6),
        },
        num_classes=3,
        class_signal=3.0,
        aux_degree_p90=3,
    )


@pytest.fixture
def synthetic():
    """Petit graphe synthétique (60 / 40 / 30 nœuds) et ses rôles"""
    return generate_synthetic(small_spec(), seed=0)


def small_config(output_dir: Path) -> ExperimentConfig:
    """Configuration réduite pour les tests d'orchestration"""
    return ExperimentConfig.model_validate({
        'dataset': small_spec().model_dump(),
        'surrogate': {'hidden_dim': 8, 'num_layers': 1, 'clean_epochs': 5},
        'pool': {'fold': 2},
        'trojan': {'hidden_dim': 8, 'heads': 2, 'head_dim': 4, 'noise_dim': 4, 'triggers_per_victim': 1},
        'bilevel': {'inner_steps': 1, 'outer_iterations': 2, 'batch_size': 4, 'poison_fraction': 0.05},
        'refine': {'steps': 2},
        'defense': {'latent_dim': 2, 'kmeans_restarts': 2, 'od_epochs': 20},
        'seeds': [0],
        'target_classes': [0],
        'output_dir': str(output_dir),
    })
