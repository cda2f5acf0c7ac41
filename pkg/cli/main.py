"""
Interface en ligne de commande du laboratoire d'attaques par porte dérobée
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config.settings import DEFAULT_CONFIG_PATH, PIPELINE_STAGES
from src.exceptions import LabError
from src.pipeline import SWEEP_PARAMETERS, run_pipeline, setup_run_logging, sweep
from src.schemas import load_config

logger = logging.getLogger(__name__)

# =====================================================
# CONSTRUCTION DU PARSEUR
# =====================================================


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, default=None, help="Fichier JSON de configuration")
    parser.add_argument('--seed', type=int, default=None, help="Graine unique (remplace config.seeds)")
    parser.add_argument('--out', type=Path, default=None, help="Répertoire de sortie (remplace config.output_dir)")
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='hetero-backdoor-lab',
        description="Attaque par porte dérobée sur graphes hétérogènes: génération, attaque, défenses, rapport",
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    for stage in PIPELINE_STAGES:
        sub = subparsers.add_parser(stage, help=f"Exécute le pipeline jusqu'à l'étape '{stage}'")
        _add_common(sub)
        sub.add_argument('--stage-resume', choices=PIPELINE_STAGES, default=None,
                         help="Recalcule à partir de cette étape en ignorant les checkpoints")

    run = subparsers.add_parser('run', help="Exécute toutes les étapes")
    _add_common(run)
    run.add_argument('--stage-resume', choices=PIPELINE_STAGES, default=None)

    sweep_parser = subparsers.add_parser('sweep', help="Balaye un hyperparamètre de l'attaque")
    _add_common(sweep_parser)
    sweep_parser.add_argument('--parameter', required=True, choices=sorted(SWEEP_PARAMETERS))
    sweep_parser.add_argument('--values', required=True, type=float, nargs='+')
    return parser


# =====================================================
# POINT D'ENTRÉE
# =====================================================

def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        path = args.config or (DEFAULT_CONFIG_PATH if DEFAULT_CONFIG_PATH.exists() else None)
        config = load_config(path).with_overrides(seed=args.seed, output_dir=args.out)
        output_dir = Path(config.output_dir)
        setup_run_logging(output_dir, args.log_level)

        if args.command == 'sweep':
            frame = sweep(config, args.parameter, args.values, output_dir)
            logger.info(f"✅ Balayage terminé: {len(frame)} lignes")
            return 0

        until = 'report' if args.command == 'run' else args.command
        summary = run_pipeline(config, until=until, resume_from=args.stage_resume, output_dir=output_dir)
        if summary is not None:
            print(summary.to_string(index=False))
        return 0
    except LabError as e:
        logger.error(f"❌ {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
