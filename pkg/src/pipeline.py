"""
Orchestration des essais: génération, entraînement propre, pools, attaque, raffinement,
évaluation, défenses et rapport agrégé
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config.settings import LOG_FILE_NAME, NAIVE_OFFSET_STD, PIPELINE_STAGES, RNG_STREAMS
from src import persistence as store
from src.bilevel import BilevelStreams, run_bilevel
from src.candidates import CandidatePool, build_pool
from src.defense import apply_defense
from src.exceptions import ConfigurationError, StageFailure
from src.heterograph import AttackTargets, GraphDelta, HeteroGraph, SchemaRoles, apply_delta
from src.logging_setup import configure_logging
from src.metrics import EvalReport, asr, cad, connection_patterns, diversity_score, prediction_breakdown, summarize
from src.refine import AffineRefiner, TRACE_COLUMNS, run_refinement
from src.schemas import ExperimentConfig
from src.surrogate import RelationalClassifier, accuracy, train_clean
from src.synthetic import build_targets, generate_synthetic, make_split, naive_feature, naive_inject
from src.trojan import AdaINStats, TriggerBatch, TriggerStreams, TrojanGenerator

logger = logging.getLogger(__name__)

SWEEP_PARAMETERS = {
    'p_mask': ('trojan', 'mask_prob'),
    'fold': ('pool', 'fold'),
    'lambda_div': ('ablation', 'lambda_div'),
    'poison_fraction': ('bilevel', 'poison_fraction'),
}
SWEEP_COLUMNS = ['parameter', 'value', 'seed', 'asr', 'cad', 'diversity']

# Artefacts produits par chaque étape (présence = étape reprenable)
STAGE_ARTIFACTS = {
    'generate-data': ('graph.json', 'split.json'),
    'train-clean': ('clean_model.json', 'clean_log.csv'),
    'build-pool': ('pool.json',),
    'attack': ('generator.json', 'surrogate.json', 'bilevel_log.csv'),
    'refine': ('refiner.json', 'refine_trace.csv', 'delta_train.json', 'delta_test.json'),
    'evaluate': ('backdoor_model.json', 'embeddings.csv', 'report.json'),
    'defend': (),
    'report': (),
}
# Variante naïve: pas de générateur ni de substitut bi-niveau
NAIVE_STAGE_ARTIFACTS = {**STAGE_ARTIFACTS, 'attack': ('naive_attack.json',)}


def substream(seed: int, name: str, salt: int = 0) -> np.random.Generator:
    """Sous-flux nommé dérivé de la graine racine"""
    if name not in RNG_STREAMS:
        raise ConfigurationError(f"Sous-flux aléatoire inconnu: {name}")
    return np.random.default_rng(np.random.SeedSequence([seed, RNG_STREAMS.index(name), salt]))


def stage_artifacts(stage: str, attack: str = 'generative') -> Tuple[str, ...]:
    return (NAIVE_STAGE_ARTIFACTS if attack == 'naive' else STAGE_ARTIFACTS)[stage]


def stage_index(stage: str) -> int:
    if stage not in PIPELINE_STAGES:
        raise ConfigurationError(f"Étape inconnue '{stage}' (attendu: {', '.join(PIPELINE_STAGES)})")
    return PIPELINE_STAGES.index(stage)


@dataclass
class TrialState:
    """État d'un essai (graine × classe cible), rempli étape par étape"""
    seed: int
    target_class: int
    directory: Path
    graph: Optional[HeteroGraph] = None
    roles: Optional[SchemaRoles] = None
    targets: Optional[AttackTargets] = None
    clean_model: Optional[RelationalClassifier] = None
    pool: Optional[CandidatePool] = None
    generator: Optional[TrojanGenerator] = None
    surrogate: Optional[RelationalClassifier] = None
    refiner: Optional[AffineRefiner] = None
    delta_train: Optional[GraphDelta] = None
    delta_test: Optional[GraphDelta] = None
    backdoor_model: Optional[RelationalClassifier] = None
    reports: List[EvalReport] = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.seed}-y{self.target_class}"

    def path(self, name: str) -> Path:
        return self.directory / name


# =====================================================
# ÉTAPES D'UN ESSAI
# =====================================================

class TrialRunner:
    """Exécute les étapes d'un essai en réutilisant les checkpoints déjà présents"""

    def __init__(self, config: ExperimentConfig, seed: int, target_class: int,
                 output_dir: Optional[Path] = None, resume_from: Optional[str] = None):
        self.config = config
        out = Path(output_dir if output_dir is not None else config.output_dir)
        self.state = TrialState(seed, target_class, out / f"{seed}-y{target_class}")
        self.resume_index = stage_index(resume_from) if resume_from is not None else len(PIPELINE_STAGES)
        self.stages: Dict[str, Tuple[Callable[[], None], Callable[[], None]]] = {
            'generate-data': (self.generate_data, self.load_data),
            'train-clean': (self.train_clean, self.load_clean),
            'build-pool': (self.build_pool, self.load_pool),
            'attack': (self.attack, self.load_attack),
            'refine': (self.refine, self.load_refine),
            'evaluate': (self.evaluate, self.load_evaluate),
            'defend': (self.defend, self.load_evaluate),
        }

    # --- boucle ---

    def run(self, until: str = 'defend') -> TrialState:
        """
        Exécute les étapes jusqu'à `until` inclus

        Raises:
            StageFailure: Étape en échec (nom de l'étape et cause)
        """
        last = min(stage_index(until), stage_index('defend'))
        self.state.directory.mkdir(parents=True, exist_ok=True)
        for index, stage in enumerate(PIPELINE_STAGES[:last + 1]):
            compute, load = self.stages[stage]
            artifacts = stage_artifacts(stage, self.config.ablation.attack)
            reusable = index < self.resume_index and bool(artifacts) \
                and store.artifact_exists(self.state.directory, *artifacts)
            try:
                if reusable:
                    logger.info(f"✅ [{self.state.key}] {stage}: checkpoint réutilisé")
                    load()
                else:
                    logger.info(f"🔄 [{self.state.key}] {stage}")
                    compute()
            except Exception as e:
                logger.error(f"❌ [{self.state.key}] Étape '{stage}' en échec: {e}")
                store.save_json({'stage': stage, 'error': type(e).__name__, 'message': str(e),
                                 'snapshot': getattr(e, 'snapshot', None)},
                                self.state.path('failure.json'))
                raise StageFailure(stage, e) from e
        return self.state

    # --- generate-data ---

    def generate_data(self) -> None:
        s, cfg = self.state, self.config
        if cfg.dataset.path:
            graph, roles = store.load_graph(cfg.dataset.path)
            if roles is None:
                raise ConfigurationError(f"Le graphe {cfg.dataset.path} ne déclare pas de rôles")
            roles = roles.with_target(s.target_class)
        else:
            graph, roles = generate_synthetic(cfg.dataset, int(substream(s.seed, 'data').integers(2**31)),
                                              s.target_class)
        split_rng = substream(s.seed, 'split')
        fractions = (cfg.split.train, cfg.split.test, cfg.split.val)
        split = make_split(graph.num_nodes(roles.primary_type), fractions, split_rng)
        s.graph, s.roles = graph, roles
        s.targets = build_targets(split, roles, cfg.bilevel.poison_fraction, split_rng)
        store.save_graph(graph, s.path('graph.json'), roles)
        store.save_targets(s.targets, s.path('split.json'))

    def load_data(self) -> None:
        s = self.state
        s.graph, roles = store.load_graph(s.path('graph.json'))
        s.roles = roles.with_target(s.target_class)
        s.targets = store.load_targets(s.path('split.json'), s.roles)

    # --- train-clean ---

    def _new_classifier(self, salt: int) -> RelationalClassifier:
        s, cfg = self.state, self.config.surrogate
        return RelationalClassifier.for_graph(s.graph, s.roles.primary_type, s.roles.num_classes,
                                              hidden_dim=cfg.hidden_dim, num_layers=cfg.num_layers,
                                              rng=substream(s.seed, 'init', salt))

    def _fit(self, graph: HeteroGraph, labels: np.ndarray, salt: int) -> Tuple[RelationalClassifier, pd.DataFrame]:
        cfg = self.config.surrogate
        return train_clean(self._new_classifier(salt), graph, labels, self.state.targets.split,
                           cfg.clean_epochs, cfg.learning_rate, cfg.weight_decay)

    def train_clean(self) -> None:
        s = self.state
        s.clean_model, log = self._fit(s.graph, s.roles.labels, salt=0)
        store.save_model(s.clean_model, s.path('clean_model.json'))
        store.save_frame(log, s.path('clean_log.csv'))

    def load_clean(self) -> None:
        self.state.clean_model = store.load_model(self.state.path('clean_model.json'))

    # --- build-pool ---

    def build_pool(self) -> None:
        s, cfg = self.state, self.config
        s.pool = build_pool(s.graph, s.roles, s.clean_model, cfg.pool.fold, cfg.ablation.pool_strategy,
                            cfg.pool.quantile, substream(s.seed, 'pool'))
        store.save_pool(s.pool, s.path('pool.json'))

    def load_pool(self) -> None:
        self.state.pool = store.load_pool(self.state.path('pool.json'))

    # --- attack ---

    def _stats(self) -> AdaINStats:
        return AdaINStats.from_features(self.state.graph.features(self.state.roles.trigger_type))

    def attack(self) -> None:
        s, cfg = self.state, self.config
        if cfg.ablation.attack == 'naive':
            self._naive_attack()
            return
        generator = TrojanGenerator.for_graph(s.graph, s.roles, config=cfg.trojan, use_adain=cfg.ablation.use_adain,
                                              rng=substream(s.seed, 'init', 1))
        surrogate = self._new_classifier(salt=2)
        streams = BilevelStreams(
            TriggerStreams(substream(s.seed, 'noise'), substream(s.seed, 'mask'), substream(s.seed, 'gumbel')),
            substream(s.seed, 'batch'),
        )
        result = run_bilevel(s.graph, s.roles, s.pool, s.targets, cfg.bilevel, generator, surrogate,
                             self._stats(), streams, cfg.lambda_div)
        s.generator, s.surrogate = result.generator, result.surrogate
        store.save_generator(s.generator, s.path('generator.json'), s.seed, cfg.lambda_div)
        store.save_model(s.surrogate, s.path('surrogate.json'))
        store.save_frame(result.log, s.path('bilevel_log.csv'))

    def _naive_attack(self) -> None:
        s = self.state
        feature = naive_feature(s.graph, s.roles.trigger_type)
        s.generator = s.surrogate = None
        store.save_json({'attack': 'naive', 'offset_std': NAIVE_OFFSET_STD, 'feature': feature.tolist()},
                        s.path('naive_attack.json'))
        logger.info(f"✅ [{s.key}] Attaque naïve: feature commune à {NAIVE_OFFSET_STD} écarts-types")

    def load_attack(self) -> None:
        if self.config.ablation.attack == 'naive':
            self.state.generator = self.state.surrogate = None
            return
        self.state.generator = store.load_generator(self.state.path('generator.json'))
        self.state.surrogate = store.load_model(self.state.path('surrogate.json'))

    # --- refine ---

    def _deploy(self, victims: np.ndarray, salt: int) -> TriggerBatch:
        s = self.state
        streams = TriggerStreams(substream(s.seed, 'noise', salt), substream(s.seed, 'mask', salt),
                                 substream(s.seed, 'gumbel', salt))
        return s.generator.generate(victims, s.graph, s.roles, s.pool, self._stats(), streams, mode='infer',
                                    params=s.generator.params.frozen())

    def refine(self) -> None:
        s, cfg = self.state, self.config
        if cfg.ablation.attack == 'naive':
            self._naive_deltas()
            return
        batch_train = self._deploy(s.targets.poisoned_train, salt=1)
        batch_test = self._deploy(s.targets.poisoned_test, salt=2)
        refiner = AffineRefiner(s.graph.feature_dim(s.roles.trigger_type), config=cfg.refine)
        if cfg.ablation.use_refinement:
            refiner, trace = run_refinement(refiner, batch_train, s.graph, s.roles, s.pool, s.surrogate)
        else:
            logger.info("Raffinement désactivé (ablation): transformation identité")
            trace = pd.DataFrame(columns=TRACE_COLUMNS)
        s.refiner = refiner

        s.delta_train = batch_train.to_delta(s.graph, s.pool, refiner.transform(batch_train.features.numpy()))
        poisoned = apply_delta(s.graph, s.delta_train, s.roles.primary_type, s.pool.budgets, s.pool.allowed)
        s.delta_test = batch_test.to_delta(poisoned, s.pool, refiner.transform(batch_test.features.numpy()))
        self._save_refine(trace)

    def _naive_deltas(self) -> None:
        """Un déclencheur naïf par victime, feature calculée sur le graphe propre"""
        s = self.state
        feature = np.asarray(store.load_json(s.path('naive_attack.json'))['feature'], dtype=np.float64)
        s.refiner = AffineRefiner(s.graph.feature_dim(s.roles.trigger_type), config=self.config.refine)
        s.delta_train = naive_inject(s.graph, s.roles, s.targets.poisoned_train, s.pool.budgets, s.pool,
                                     rng=substream(s.seed, 'naive', 1), feature=feature)
        poisoned = apply_delta(s.graph, s.delta_train, s.roles.primary_type, s.pool.budgets, s.pool.allowed)
        s.delta_test = naive_inject(poisoned, s.roles, s.targets.poisoned_test, s.pool.budgets, s.pool,
                                    rng=substream(s.seed, 'naive', 2), feature=feature)
        self._save_refine(pd.DataFrame(columns=TRACE_COLUMNS))

    def _save_refine(self, trace: pd.DataFrame) -> None:
        s = self.state
        store.save_refiner(s.refiner, s.path('refiner.json'))
        store.save_frame(trace, s.path('refine_trace.csv'))
        store.save_delta(s.delta_train, s.path('delta_train.json'))
        store.save_delta(s.delta_test, s.path('delta_test.json'))

    def load_refine(self) -> None:
        s = self.state
        s.refiner = store.load_refiner(s.path('refiner.json'))
        s.delta_train = store.load_delta(s.path('delta_train.json'))
        s.delta_test = store.load_delta(s.path('delta_test.json'))

    # --- evaluate ---

    def poisoned_graphs(self) -> Tuple[HeteroGraph, HeteroGraph]:
        """Graphe d'entraînement empoisonné et graphe d'évaluation (déclencheurs de test ajoutés)"""
        s = self.state
        budgets, allowed = s.pool.budgets, s.pool.allowed
        poisoned = apply_delta(s.graph, s.delta_train, s.roles.primary_type, budgets, allowed)
        evaluation = apply_delta(poisoned, s.delta_test, s.roles.primary_type, budgets, allowed)
        return poisoned, evaluation

    def poisoned_labels(self) -> np.ndarray:
        labels = np.array(self.state.roles.labels, dtype=np.int64)
        labels[self.state.targets.poisoned_train] = self.state.target_class
        return labels

    def _report(self, model: RelationalClassifier, evaluation: HeteroGraph, defense: str) -> EvalReport:
        s = self.state
        test = s.targets.split.test
        clean_acc = accuracy(s.clean_model, s.graph, s.roles.labels, test)
        model_acc = accuracy(model, s.graph, s.roles.labels, test)
        victims = s.targets.poisoned_test
        excluded = int(np.sum(s.roles.labels[victims] == s.target_class))
        try:
            diversity = diversity_score(connection_patterns(s.delta_test, s.pool))
        except ConfigurationError as e:
            logger.warning(f"⚠️ Score de diversité indisponible: {e}")
            diversity = None
        return EvalReport(
            seed=s.seed, target_class=s.target_class, defense=defense,
            asr=asr(model, evaluation, victims, s.target_class, s.roles.labels),
            cad=cad(clean_acc, model_acc, test, test),
            diversity=diversity, clean_accuracy=clean_acc, backdoor_accuracy=model_acc,
            n_poisoned_test=int(victims.size - excluded), excluded_victims=excluded,
            per_class=prediction_breakdown(model, evaluation, victims, s.roles.num_classes),
        )

    def _embeddings(self, evaluation: HeteroGraph) -> pd.DataFrame:
        s = self.state
        victims = np.union1d(s.targets.poisoned_train, s.targets.poisoned_test)
        frames = []
        for name, model, graph in (('clean', s.clean_model, s.graph), ('backdoor', s.backdoor_model, evaluation)):
            hidden = model.embed(graph)
            frame = pd.DataFrame(hidden, columns=[f"h_{i}" for i in range(hidden.shape[1])])
            frame.insert(0, 'is_victim', np.isin(np.arange(hidden.shape[0]), victims).astype(int))
            frame.insert(0, 'label', s.roles.labels)
            frame.insert(0, 'node', np.arange(hidden.shape[0]))
            frame.insert(0, 'model', name)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def _save_reports(self) -> None:
        payload = {'reports': [r.model_dump() for r in self.state.reports]}
        store.save_json(payload, self.state.path('report.json'))

    def evaluate(self) -> None:
        s = self.state
        poisoned, evaluation = self.poisoned_graphs()
        s.backdoor_model, log = self._fit(poisoned, self.poisoned_labels(), salt=3)
        store.save_model(s.backdoor_model, s.path('backdoor_model.json'))
        store.save_frame(log, s.path('backdoor_log.csv'))
        store.save_frame(self._embeddings(evaluation), s.path('embeddings.csv'))
        s.reports = [self._report(s.backdoor_model, evaluation, 'none')]
        self._save_reports()
        logger.info(f"✅ [{s.key}] ASR={s.reports[0].asr:.3f} CAD={s.reports[0].cad:+.4f}")

    def load_evaluate(self) -> None:
        s = self.state
        s.backdoor_model = store.load_model(s.path('backdoor_model.json'))
        s.reports = [EvalReport(**r) for r in store.load_json(s.path('report.json'))['reports']]

    # --- defend ---

    def defend(self) -> None:
        s, cfg = self.state, self.config
        if s.backdoor_model is None or not s.reports:
            self.load_evaluate()
        s.reports = [r for r in s.reports if r.defense == 'none']
        _, evaluation = self.poisoned_graphs()
        for index, name in enumerate(cfg.defense.enabled):
            outcome = apply_defense(name, evaluation, self.poisoned_labels(), s.roles, cfg.defense,
                                    int(substream(s.seed, 'defense', index).integers(2**31)))
            store.save_report(outcome.report, s.path(f'defense_{name}.json'))
            model, _ = self._fit(outcome.graph, outcome.labels, salt=4 + index)
            s.reports.append(self._report(model, outcome.graph, name))
            logger.info(f"✅ [{s.key}] Défense {name}: ASR={s.reports[-1].asr:.3f}")
        self._save_reports()


# =====================================================
# EXPÉRIENCE COMPLÈTE
# =====================================================

def run_trial(config: ExperimentConfig, seed: int, target_class: int, output_dir: Optional[Path] = None,
              until: str = 'defend', resume_from: Optional[str] = None) -> List[EvalReport]:
    state = TrialRunner(config, seed, target_class, output_dir, resume_from).run(until)
    return state.reports


def write_summary(reports: Sequence[EvalReport], output_dir: Path) -> pd.DataFrame:
    """summary.csv et summary.json (moyenne ± écart-type par classe cible et défense)"""
    summary = summarize(reports)
    store.save_frame(summary, output_dir / 'summary.csv')
    store.save_json({'trials': [r.model_dump() for r in sorted(reports, key=lambda r: (r.target_class, r.defense, r.seed))],
                     'summary': summary.to_dict(orient='records')}, output_dir / 'summary.json')
    return summary


def collect_reports(output_dir: Path) -> List[EvalReport]:
    reports = []
    for path in sorted(Path(output_dir).glob('*-y*/report.json')):
        reports.extend(EvalReport(**r) for r in store.load_json(path)['reports'])
    return reports


def run_pipeline(config: ExperimentConfig, until: str = 'report', resume_from: Optional[str] = None,
                 output_dir: Optional[Path] = None) -> Optional[pd.DataFrame]:
    """
    Exécute tous les essais (graines × classes cibles) jusqu'à l'étape `until`

    Args:
        config: Configuration validée
        until: Dernière étape exécutée
        resume_from: Étape à partir de laquelle les checkpoints sont ignorés
        output_dir: Répertoire de sortie (par défaut config.output_dir)

    Returns:
        Optional[pd.DataFrame]: Résumé si l'étape 'report' est atteinte
    """
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage_index(until)
    if resume_from is not None:
        stage_index(resume_from)
    trials = [(seed, target) for target in config.target_classes for seed in config.seeds]
    logger.info(f"🔄 {len(trials)} essai(s) jusqu'à l'étape '{until}' dans {out}")

    trial_stage = PIPELINE_STAGES[min(stage_index(until), stage_index('defend'))]
    Parallel(n_jobs=config.n_jobs, prefer="threads")(
        delayed(run_trial)(config, seed, target, out, trial_stage, resume_from) for seed, target in trials
    )
    if until != 'report':
        return None
    reports = collect_reports(out)
    if not reports:
        raise ConfigurationError(f"Aucun rapport d'essai dans {out}")
    summary = write_summary(reports, out)
    logger.info(f"✅ Résumé écrit dans {out / 'summary.csv'}")
    return summary


def sweep(config: ExperimentConfig, parameter: str, values: Sequence[float],
          output_dir: Optional[Path] = None) -> pd.DataFrame:
    """
    Rejoue l'attaque pour chaque valeur d'un hyperparamètre et écrit sweep_<paramètre>.csv

    Raises:
        ConfigurationError: Paramètre non balayable
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"Paramètre '{parameter}' non balayable ({', '.join(SWEEP_PARAMETERS)})")
    section, name = SWEEP_PARAMETERS[parameter]
    out = Path(output_dir if output_dir is not None else config.output_dir)
    rows: List[Dict[str, Any]] = []
    for value in values:
        value = int(value) if parameter == 'fold' else float(value)
        data = config.model_dump()
        data[section][name] = value
        variant = ExperimentConfig.model_validate(data)
        directory = out / 'sweep' / f"{parameter}={value}"
        logger.info(f"🔄 Balayage {parameter}={value}")
        for seed in variant.seeds:
            report = run_trial(variant, seed, variant.target_classes[0], directory, until='evaluate')[0]
            rows.append({'parameter': parameter, 'value': value, 'seed': seed, 'asr': report.asr,
                         'cad': report.cad, 'diversity': report.diversity})
    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    store.save_frame(frame, out / f"sweep_{parameter}.csv")
    return frame


def setup_run_logging(output_dir: Path, level: str = 'INFO') -> None:
    configure_logging(level, Path(output_dir) / LOG_FILE_NAME)

