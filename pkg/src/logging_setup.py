"""
Configuration du logging: console lisible + fichier JSON structuré
"""
import logging
from pathlib import Path
from typing import Optional, Union

from pythonjsonlogger import jsonlogger

from config.settings import LOG_FORMAT, JSON_LOG_FORMAT

_HANDLER_TAG = "_lab_handler"


def configure_logging(level: Union[int, str] = logging.INFO,
                      log_file: Optional[Path] = None) -> logging.Logger:
    """
    Installe les handlers du laboratoire sur le logger racine

    Args:
        level: Niveau de log (nom ou entier)
        log_file: Fichier JSON-lines optionnel pour les logs structurés

    Returns:
        logging.Logger: Le logger racine configuré
    """
    root = logging.getLogger()
    root.setLevel(level)

    # Rappel idempotent: on retire les handlers posés par un appel précédent
    for handler in list(root.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    setattr(console, _HANDLER_TAG, True)
    root.addHandler(console)

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(jsonlogger.JsonFormatter(JSON_LOG_FORMAT))
        setattr(file_handler, _HANDLER_TAG, True)
        root.addHandler(file_handler)

    return root
