"""
Tests de validation de la configuration
"""
import pytest

from config.settings import DEFAULT_CONFIG_PATH
from src.exceptions import ConfigurationError
from src.schemas import ExperimentConfig, load_config, parse_config


def test_default_config_file_is_valid():
    config = load_config(DEFAULT_CONFIG_PATH)
    assert config.dataset.primary_type == 'paper'
    assert config.defense.enabled == ['csd', 'prune', 'od']
    assert config.lambda_div == 1.0


def test_missing_path_gives_defaults():
    assert load_config(None) == ExperimentConfig()


@pytest.mark.parametrize("data", [
    {'split': {'train': 0.7, 'test': 0.2, 'val': 0.2}},
    {'bilevel': {'poison_fraction': 0.3}, 'split': {'train': 0.5, 'test': 0.25, 'val': 0.25}},
    {'dataset': {'relations': [['paper', 'venue']]}},
    {'dataset': {'trigger_type': 'paper'}},
    {'defense': {'rectify_neighbors': 4}},
    {'bilevel': {'batch_size': 1}},
    {'refine': {'bandwidth_multipliers': []}},
    {'target_classes': [3]},
    {'unknown_section': {}},
])
def test_invalid_configs_are_rejected(data):
    """Fractions, types, voisins pairs, lot trop petit, classe cible hors bornes, clé inconnue"""
    with pytest.raises(ConfigurationError):
        parse_config(data)


def test_ablation_overrides_diversity_weight():
    config = parse_config({'ablation': {'lambda_div': 0.0}})
    assert config.lambda_div == 0.0
    assert config.bilevel.lambda_div == 1.0


def test_with_overrides(tmp_path):
    config = ExperimentConfig().with_overrides(seed=7, output_dir=tmp_path)
    assert config.seeds == [7]
    assert config.output_dir == str(tmp_path)
