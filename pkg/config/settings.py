"""
Configuration centralisée du laboratoire d'attaques par porte dérobée sur graphes hétérogènes
"""
from pathlib import Path

# === CHEMINS DES FICHIERS ===
PROJECT_ROOT = Path(__file__).parent.parent
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config" / "default_experiment.json"

# === FORMATS D'ARTEFACTS ===
CHECKPOINT_FORMAT_VERSION = 1
MAX_REPORTED_VIOLATIONS = 10

# === LOGGING ===
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
JSON_LOG_FORMAT = '%(asctime)s %(name)s %(levelname)s %(message)s'
LOG_FILE_NAME = "run.log.jsonl"

# === MOTEUR DE DIFFÉRENTIATION ===
LAYER_NORM_EPS = 1e-5
L2_NORMALIZE_EPS = 1e-12
GRAD_CHECK_STEP = 1e-5

# === OPTIMISEUR (AdamW) ===
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-4
GRADIENT_CLIP = 1.0

# === MODÈLE SUBSTITUT ===
HIDDEN_DIM = 32
NUM_LAYERS = 2
CLEAN_EPOCHS = 200
CLEAN_LEARNING_RATE = 1e-2

# === POOL DE CANDIDATS ===
DEGREE_QUANTILE = 0.9
POOL_FOLD = 6

# === GÉNÉRATEUR DE TRIGGERS ===
GENERATOR_HIDDEN = 64
ATTENTION_HEADS = 4
HEAD_DIM = 8
NOISE_DIM = 16
MASK_PROB = 0.2
GUMBEL_TEMPERATURE = 0.5
DIVERSITY_MARGIN = 0.5
DIVERSITY_WEIGHT = 1.0
TRIGGERS_PER_VICTIM = 3
ADAIN_EPS = 1e-8
TOPK_RESIDUAL_TOL = 1e-10
TOPK_MAX_ITER = 200

# === OPTIMISATION BI-NIVEAU ===
INNER_STEPS = 5
OUTER_ITERATIONS = 100
SURROGATE_LEARNING_RATE = 1e-2
GENERATOR_LEARNING_RATE = 1e-3
OUTER_BATCH_SIZE = 32
POISON_FRACTION = 0.05

# === RAFFINEMENT AFFINE ===
REFINE_STEPS = 200
REFINE_LEARNING_RATE = 1e-3
BANDWIDTH_MULTIPLIERS = (0.5, 1.0, 2.0)
CONDITION_WARNING = 1e6

# === DÉFENSES ===
SEPARATION_THRESHOLD = 2.0
PCA_LATENT_DIM = 8
KMEANS_RESTARTS = 50
RECTIFY_NEIGHBORS = 3
PRUNE_FRACTION = 0.1
OD_DROP_FRACTION = 0.05
OD_EPOCHS = 200
PRUNE_PROJECTION_DIM = 16

# === MÉTRIQUES ===
STD_DAGGER_THRESHOLD = 0.1
MIN_SEEDS = 3

# === JEU DE DONNÉES SYNTHÉTIQUE (1/10 de l'échelle ACM) ===
DEFAULT_NODE_TYPES = {
    'paper': {'count': 1500, 'feature_dim': 32},
    'author': {'count': 800, 'feature_dim': 16},
    'subject': {'count': 700, 'feature_dim': 16},
}
DEFAULT_RELATIONS = [
    ('paper', 'author'),
    ('author', 'subject'),
    ('paper', 'subject'),
    ('paper', 'paper'),
]
DEFAULT_PRIMARY_TYPE = 'paper'
DEFAULT_TRIGGER_TYPE = 'author'
NUM_CLASSES = 3
CLASS_SIGNAL = 1.5
HOMOPHILY = 0.8
AUX_DEGREE_P90 = 6
PARETO_SHAPE = 1.5

# === DÉCOUPAGE (train / test / validation) ===
SPLIT_FRACTIONS = (0.70, 0.20, 0.10)

# === ATTAQUE NAÏVE (référence pour les défenses) ===
NAIVE_OFFSET_STD = 10.0

# === SOUS-FLUX ALÉATOIRES ===
RNG_STREAMS = ('data', 'split', 'init', 'pool', 'gumbel', 'mask', 'noise', 'batch', 'defense', 'naive')

# === ÉTAPES DU PIPELINE (ordre exact) ===
PIPELINE_STAGES = [
    'generate-data',
    'train-clean',
    'build-pool',
    'attack',
    'refine',
    'evaluate',
    'defend',
    'report',
]
