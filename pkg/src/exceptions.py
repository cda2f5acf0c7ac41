"""
Hiérarchie des erreurs du laboratoire
"""
from typing import Any, Dict, List, Optional


class LabError(Exception):
    """Racine commune de toutes les erreurs du projet"""


class SchemaError(LabError, ValueError):
    """Relation ou type inconnu, identifiant hors bornes, dimension incohérente"""


class GraphValidationError(SchemaError):
    """Violations détectées à la construction ou au chargement d'un graphe"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        shown = "; ".join(self.violations)
        super().__init__(f"Graphe invalide ({len(self.violations)} violation(s)): {shown}")


class DeltaValidationError(SchemaError):
    """Delta d'empoisonnement incohérent avec le graphe cible"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__(f"Delta invalide: {'; '.join(self.violations)}")


class ShapeError(LabError, ValueError):
    """Formes incompatibles pour une opération différentiable"""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"[{op}] formes incompatibles: {detail}")


class NumericFault(LabError, ArithmeticError):
    """Valeur NaN ou infinie produite par une opération ou un gradient"""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"Valeur non finie détectée dans {where}")


class ConfigurationError(LabError, ValueError):
    """Configuration ou pré-condition invalide"""


class ClusteringError(LabError, RuntimeError):
    """Cluster vide lors du calcul du ratio de séparation"""


class InvariantError(LabError, RuntimeError):
    """Invariant interne violé"""


class TrainingDivergence(LabError, RuntimeError):
    """Perte non finie pendant une optimisation, avec instantané de diagnostic"""

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        self.snapshot = snapshot or {}
        super().__init__(message)


class StageFailure(LabError, RuntimeError):
    """Échec d'une étape du pipeline"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Étape '{stage}' en échec: {cause}")
