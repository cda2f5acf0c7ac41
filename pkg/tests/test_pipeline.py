"""
Tests d'orchestration: exécution complète, reprise, défenses désactivées, échecs d'étape, CLI
"""
import json

import numpy as np
import pytest

from cli.main import build_parser, main
from conftest import small_config
from src.exceptions import ConfigurationError, StageFailure
from src.persistence import load_delta
from src.pipeline import STAGE_ARTIFACTS, run_pipeline, run_trial, stage_artifacts, substream, sweep


def _without_defenses(config):
    return config.model_copy(update={'defense': config.defense.model_copy(update={'enabled': []})})


def test_full_run_writes_summary(tmp_path):
    """Exécution complète: un rapport par défense et un résumé agrégé"""
    summary = run_pipeline(small_config(tmp_path))
    assert sorted(summary['defense']) == ['csd', 'none', 'od', 'prune']
    assert summary['asr_mean'].between(0, 1).all()
    assert (tmp_path / 'summary.csv').exists()
    trial = tmp_path / '0-y0'
    for stage in ('generate-data', 'train-clean', 'build-pool', 'attack', 'refine', 'evaluate'):
        assert all((trial / name).exists() for name in STAGE_ARTIFACTS[stage])
    assert (trial / 'defense_csd.json').exists()


def test_run_is_deterministic(tmp_path):
    """Même configuration et mêmes graines → rapports identiques"""
    config = _without_defenses(small_config(tmp_path))
    run_pipeline(config, output_dir=tmp_path / 'a')
    run_pipeline(config, output_dir=tmp_path / 'b')
    first = (tmp_path / 'a' / '0-y0' / 'report.json').read_bytes()
    second = (tmp_path / 'b' / '0-y0' / 'report.json').read_bytes()
    assert first == second


def test_resume_reproduces_report(tmp_path):
    """Reprise à l'évaluation depuis les checkpoints → même rapport"""
    config = _without_defenses(small_config(tmp_path))
    run_pipeline(config)
    before = (tmp_path / '0-y0' / 'report.json').read_bytes()
    run_pipeline(config, resume_from='evaluate')
    assert (tmp_path / '0-y0' / 'report.json').read_bytes() == before


def _naive(config):
    return config.model_copy(update={'ablation': config.ablation.model_copy(update={'attack': 'naive'})})


def test_naive_attack_variant(tmp_path):
    """Attaque naïve: pas de générateur, triggers identiques, reprise à l'évaluation → même rapport"""
    config = _naive(_without_defenses(small_config(tmp_path)))
    reports = run_trial(config, 0, 0, tmp_path)
    trial = tmp_path / '0-y0'
    assert [r.defense for r in reports] == ['none']
    assert (trial / 'naive_attack.json').exists()
    assert not (trial / 'generator.json').exists()
    for stage in ('attack', 'refine', 'evaluate'):
        assert all((trial / name).exists() for name in stage_artifacts(stage, 'naive'))

    delta_test = load_delta(trial / 'delta_test.json')
    delta_train = load_delta(trial / 'delta_train.json')
    assert delta_test.size == reports[0].n_poisoned_test + reports[0].excluded_victims
    assert np.allclose(delta_test.new_features, delta_test.new_features[0])
    assert np.allclose(delta_train.new_features[0], delta_test.new_features[0])

    before = (trial / 'report.json').read_bytes()
    run_trial(config, 0, 0, tmp_path, resume_from='evaluate')
    assert (trial / 'report.json').read_bytes() == before


def test_partial_run_stops_at_stage(tmp_path):
    """Arrêt après l'attaque: pas de rapport, pas de résumé"""
    assert run_pipeline(small_config(tmp_path), until='attack') is None
    assert (tmp_path / '0-y0' / 'generator.json').exists()
    assert not (tmp_path / '0-y0' / 'report.json').exists()
    assert not (tmp_path / 'summary.csv').exists()


def test_disabled_defenses(tmp_path):
    reports = run_trial(_without_defenses(small_config(tmp_path)), 0, 0, tmp_path)
    assert [r.defense for r in reports] == ['none']
    assert reports[0].n_poisoned_test == 3


def test_stage_failure_is_recorded(tmp_path):
    """Graphe d'entrée introuvable → StageFailure et failure.json"""
    config = small_config(tmp_path)
    config = config.model_copy(update={'dataset': config.dataset.model_copy(update={'path': str(tmp_path / 'absent.json')})})
    with pytest.raises(StageFailure) as excinfo:
        run_trial(config, 0, 0, tmp_path)
    assert excinfo.value.stage == 'generate-data'
    failure = json.loads((tmp_path / '0-y0' / 'failure.json').read_text())
    assert failure['stage'] == 'generate-data'
    assert failure['error'] == 'ConfigurationError'


def test_unknown_stage_and_stream(tmp_path):
    with pytest.raises(ConfigurationError):
        run_pipeline(small_config(tmp_path), until='deploy')
    with pytest.raises(ConfigurationError):
        substream(0, 'weather')


def test_sweep_writes_one_row_per_value(tmp_path):
    frame = sweep(small_config(tmp_path), 'p_mask', [0.0, 0.3])
    assert frame['value'].tolist() == [0.0, 0.3]
    assert (tmp_path / 'sweep_p_mask.csv').exists()
    with pytest.raises(ConfigurationError):
        sweep(small_config(tmp_path), 'hidden_dim', [4])


def test_cli_parser():
    """Une sous-commande par étape, plus run et sweep"""
    args = build_parser().parse_args(['attack', '--seed', '3', '--stage-resume', 'build-pool'])
    assert (args.command, args.seed, args.stage_resume) == ('attack', 3, 'build-pool')
    with pytest.raises(SystemExit):
        build_parser().parse_args(['deploy'])


def test_cli_reports_errors(tmp_path):
    """Configuration illisible → code de sortie 1"""
    (tmp_path / 'config.json').write_text('{')
    assert main(['run', '--config', str(tmp_path / 'config.json'), '--out', str(tmp_path / 'out')]) == 1
