"""
Modèles Pydantic de configuration d'expérience
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config.settings import (
    ATTENTION_HEADS,
    AUX_DEGREE_P90,
    BANDWIDTH_MULTIPLIERS,
    CLASS_SIGNAL,
    CLEAN_EPOCHS,
    CLEAN_LEARNING_RATE,
    CONDITION_WARNING,
    DEFAULT_NODE_TYPES,
    DEFAULT_PRIMARY_TYPE,
    DEFAULT_RELATIONS,
    DEFAULT_TRIGGER_TYPE,
    DEGREE_QUANTILE,
    DIVERSITY_MARGIN,
    DIVERSITY_WEIGHT,
    GENERATOR_HIDDEN,
    GENERATOR_LEARNING_RATE,
    GUMBEL_TEMPERATURE,
    HEAD_DIM,
    HIDDEN_DIM,
    HOMOPHILY,
    INNER_STEPS,
    KMEANS_RESTARTS,
    MASK_PROB,
    NOISE_DIM,
    NUM_CLASSES,
    NUM_LAYERS,
    OD_DROP_FRACTION,
    OD_EPOCHS,
    OUTER_BATCH_SIZE,
    OUTER_ITERATIONS,
    PARETO_SHAPE,
    PCA_LATENT_DIM,
    POISON_FRACTION,
    POOL_FOLD,
    PRUNE_FRACTION,
    PRUNE_PROJECTION_DIM,
    RECTIFY_NEIGHBORS,
    REFINE_LEARNING_RATE,
    REFINE_STEPS,
    SEPARATION_THRESHOLD,
    SPLIT_FRACTIONS,
    SURROGATE_LEARNING_RATE,
    TRIGGERS_PER_VICTIM,
    WEIGHT_DECAY,
)
from src.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

DEFENSE_NAMES = ('csd', 'prune', 'od')


class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class NodeTypeSpec(_Strict):
    """Effectif et largeur de features d'un type de nœud"""
    count: int = Field(..., ge=1, description="Nombre de nœuds")
    feature_dim: int = Field(..., ge=1, description="Largeur des features")


class DatasetSpec(_Strict):
    """Schéma et paramètres du graphe synthétique"""
    node_types: Dict[str, NodeTypeSpec] = Field(
        default_factory=lambda: {t: NodeTypeSpec(**v) for t, v in DEFAULT_NODE_TYPES.items()}
    )
    relations: List[Tuple[str, str]] = Field(default_factory=lambda: list(DEFAULT_RELATIONS))
    primary_type: str = DEFAULT_PRIMARY_TYPE
    trigger_type: str = DEFAULT_TRIGGER_TYPE
    num_classes: int = Field(NUM_CLASSES, ge=2)
    class_signal: float = Field(CLASS_SIGNAL, gt=0, description="Écart entre centres de classes (en écarts-types)")
    homophily: float = Field(HOMOPHILY, ge=0, le=1)
    aux_degree_p90: int = Field(AUX_DEGREE_P90, ge=1, description="P90 visé des degrés déclencheur → auxiliaire")
    pareto_shape: float = Field(PARETO_SHAPE, gt=0)
    path: Optional[str] = Field(None, description="Graphe JSON à charger au lieu de générer")

    @model_validator(mode='after')
    def check_schema(self) -> "DatasetSpec":
        types = set(self.node_types)
        for src, dst in self.relations:
            if src not in types or dst not in types:
                raise ValueError(f"Relation ({src}, {dst}) sur un type inconnu")
        if len(set(self.relations)) != len(self.relations):
            raise ValueError("Relation déclarée deux fois")
        for role in (self.primary_type, self.trigger_type):
            if role not in types:
                raise ValueError(f"Type de rôle inconnu: {role}")
        if self.primary_type == self.trigger_type:
            raise ValueError("Le type principal et le type déclencheur doivent différer")
        if (self.primary_type, self.trigger_type) not in self.relations \
                and (self.trigger_type, self.primary_type) not in self.relations:
            raise ValueError("Aucune relation entre type principal et type déclencheur")
        if not any(src == self.trigger_type and dst not in (self.primary_type, self.trigger_type)
                   for src, dst in self.relations):
            raise ValueError("Le type déclencheur n'a aucune relation vers un type auxiliaire")
        if len(types) + len(self.relations) <= 2:
            raise ValueError("Condition d'hétérogénéité |T| + |R| > 2 non respectée")
        return self


class SplitConfig(_Strict):
    """Fractions train / test / validation"""
    train: float = Field(SPLIT_FRACTIONS[0], gt=0, lt=1)
    test: float = Field(SPLIT_FRACTIONS[1], gt=0, lt=1)
    val: float = Field(SPLIT_FRACTIONS[2], gt=0, lt=1)

    @model_validator(mode='after')
    def check_sum(self) -> "SplitConfig":
        if not math.isclose(self.train + self.test + self.val, 1.0, abs_tol=1e-9):
            raise ValueError(f"Les fractions doivent sommer à 1 (reçu {self.train + self.test + self.val})")
        return self


class SurrogateConfig(_Strict):
    hidden_dim: int = Field(HIDDEN_DIM, ge=1)
    num_layers: int = Field(NUM_LAYERS, ge=0)
    clean_epochs: int = Field(CLEAN_EPOCHS, ge=0)
    learning_rate: float = Field(CLEAN_LEARNING_RATE, gt=0)
    weight_decay: float = Field(WEIGHT_DECAY, ge=0)


class PoolConfig(_Strict):
    fold: int = Field(POOL_FOLD, ge=1, description="Facteur n de K_pool = n·K")
    quantile: float = Field(DEGREE_QUANTILE, gt=0, le=1)


class TrojanConfig(_Strict):
    """Hyperparamètres du générateur de triggers"""
    hidden_dim: int = Field(GENERATOR_HIDDEN, ge=1)
    heads: int = Field(ATTENTION_HEADS, ge=1)
    head_dim: int = Field(HEAD_DIM, ge=1)
    noise_dim: int = Field(NOISE_DIM, ge=1)
    mask_prob: float = Field(MASK_PROB, ge=0, lt=1)
    temperature: float = Field(GUMBEL_TEMPERATURE, ge=0)
    margin: float = Field(DIVERSITY_MARGIN, ge=0, le=1, description="Marge τ de la perte de diversité")
    triggers_per_victim: int = Field(TRIGGERS_PER_VICTIM, ge=1)


class BilevelConfig(_Strict):
    """Optimisation bi-niveau alternée"""
    inner_steps: int = Field(INNER_STEPS, ge=1)
    outer_iterations: int = Field(OUTER_ITERATIONS, ge=0)
    surrogate_lr: float = Field(SURROGATE_LEARNING_RATE, gt=0)
    generator_lr: float = Field(GENERATOR_LEARNING_RATE, gt=0)
    batch_size: int = Field(OUTER_BATCH_SIZE, ge=2)
    lambda_div: float = Field(DIVERSITY_WEIGHT, ge=0)
    poison_fraction: float = Field(POISON_FRACTION, gt=0, lt=0.5)


class RefineConfig(_Strict):
    steps: int = Field(REFINE_STEPS, ge=0)
    learning_rate: float = Field(REFINE_LEARNING_RATE, gt=0)
    bandwidth_multipliers: List[float] = Field(default_factory=lambda: list(BANDWIDTH_MULTIPLIERS))
    mmd_reference: Literal['clean', 'generated'] = 'clean'
    condition_warning: float = Field(CONDITION_WARNING, gt=1)

    @field_validator('bandwidth_multipliers')
    @classmethod
    def positive_multipliers(cls, value: List[float]) -> List[float]:
        if not value or any(m <= 0 for m in value):
            raise ValueError("Multiplicateurs de largeur de bande strictement positifs requis")
        return value


class DefenseConfig(_Strict):
    """Défenses à appliquer après l'attaque"""
    enabled: List[Literal['csd', 'prune', 'od']] = Field(default_factory=lambda: list(DEFENSE_NAMES))
    separation_threshold: float = Field(SEPARATION_THRESHOLD, gt=0)
    latent_dim: int = Field(PCA_LATENT_DIM, ge=1)
    kmeans_restarts: int = Field(KMEANS_RESTARTS, ge=1)
    rectify_neighbors: int = Field(RECTIFY_NEIGHBORS, ge=1)
    prune_fraction: float = Field(PRUNE_FRACTION, ge=0, le=0.5)
    projection_dim: int = Field(PRUNE_PROJECTION_DIM, ge=1)
    od_drop_fraction: float = Field(OD_DROP_FRACTION, ge=0, le=0.5)
    od_epochs: int = Field(OD_EPOCHS, ge=1)
    n_jobs: int = Field(1, ge=1)

    @field_validator('rectify_neighbors')
    @classmethod
    def odd_neighbors(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"k doit être impair pour le vote majoritaire (reçu {value})")
        return value


class AblationConfig(_Strict):
    """Interrupteurs d'ablation"""
    attack: Literal['generative', 'naive'] = Field(
        'generative', description="'naive': feature commune et connexions aléatoires")
    use_adain: bool = True
    use_refinement: bool = True
    pool_strategy: Literal['saliency', 'random'] = 'saliency'
    lambda_div: Optional[float] = Field(None, ge=0, description="Remplace bilevel.lambda_div si fourni")


class ExperimentConfig(_Strict):
    """Configuration complète d'une expérience"""
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    split: SplitConfig = Field(default_factory=SplitConfig)
    surrogate: SurrogateConfig = Field(default_factory=SurrogateConfig)
    pool: PoolConfig = Field(default_factory=PoolConfig)
    trojan: TrojanConfig = Field(default_factory=TrojanConfig)
    bilevel: BilevelConfig = Field(default_factory=BilevelConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    defense: DefenseConfig = Field(default_factory=DefenseConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    target_classes: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "runs"
    n_jobs: int = Field(1, ge=1, description="Essais exécutés en parallèle")

    @model_validator(mode='after')
    def check_cross_fields(self) -> "ExperimentConfig":
        poison = self.bilevel.poison_fraction
        if poison > self.split.train or poison > self.split.test:
            raise ValueError(f"Fraction empoisonnée {poison} supérieure à la part train ou test")
        for target in self.target_classes:
            if not 0 <= target < self.dataset.num_classes:
                raise ValueError(f"Classe cible {target} hors de [0, {self.dataset.num_classes})")
        return self

    @property
    def lambda_div(self) -> float:
        """Poids de diversité effectif (l'ablation prime)"""
        override = self.ablation.lambda_div
        return self.bilevel.lambda_div if override is None else override

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[Union[str, Path]] = None) -> "ExperimentConfig":
        update = {}
        if seed is not None:
            update['seeds'] = [seed]
        if output_dir is not None:
            update['output_dir'] = str(output_dir)
        return self.model_copy(update=update)


def parse_config(data: dict) -> ExperimentConfig:
    """
    Valide un document de configuration

    Raises:
        ConfigurationError: Si la validation Pydantic échoue
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Configuration invalide: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Charge un fichier JSON de configuration (valeurs par défaut si absent)"""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"❌ Lecture de la configuration impossible ({path}): {e}")
        raise ConfigurationError(f"Configuration illisible: {path}") from e
    config = parse_config(data)
    logger.info(f"✅ Configuration chargée depuis {path}")
    return config
