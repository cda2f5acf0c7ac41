"""
Classifieur relationnel de nœuds (substitut f_s, modèle empoisonné f_b, référence propre f_c)
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config.settings import (
    CHECKPOINT_FORMAT_VERSION,
    CLEAN_EPOCHS,
    CLEAN_LEARNING_RATE,
    GRADIENT_CLIP,
    HIDDEN_DIM,
    NUM_LAYERS,
    WEIGHT_DECAY,
)
from src import diffmath as dm
from src.diffmath import AdamW, ParameterSet, Tape, Tensor, glorot_uniform
from src.exceptions import ConfigurationError, SchemaError
from src.heterograph import HeteroGraph, Relation, Split

logger = logging.getLogger(__name__)

FeatureOverride = Mapping[str, Union[Tensor, np.ndarray]]


@dataclass
class SoftTriggerRows:
    """
    Lignes d'agrégation différentiables des déclencheurs injectés

    Pour chaque relation déclencheur → auxiliaire, la ligne du déclencheur i vaut
    (1/K) Σ_j S[i, j] · h(pool[j]) où S est la sélection (valeur dure, gradient droit-à-travers).
    """
    start: int
    rows: Dict[Relation, Tuple[np.ndarray, Tensor, int]] = field(default_factory=dict)


def _channel_name(relation: Relation, reverse: bool) -> str:
    return f"{relation.dst}<-{relation.src}" if reverse else relation.name


class RelationalClassifier:
    """Réseau relationnel à agrégation moyenne sur les deux sens de chaque relation"""

    def __init__(self, type_dims: Mapping[str, int], relations: Sequence[Relation], primary_type: str,
                 num_classes: int, hidden_dim: int = HIDDEN_DIM, num_layers: int = NUM_LAYERS,
                 rng: Optional[np.random.Generator] = None, params: Optional[ParameterSet] = None):
        if primary_type not in type_dims:
            raise SchemaError(f"Type principal {primary_type} absent des dimensions")
        if num_layers < 0 or hidden_dim < 1 or num_classes < 1:
            raise ConfigurationError("Architecture invalide (couches ≥ 0, largeur ≥ 1, classes ≥ 1)")
        self.type_dims = dict(type_dims)
        self.relations = tuple(Relation(r.src, r.dst) for r in relations)
        self.primary_type = primary_type
        self.num_classes = int(num_classes)
        self.hidden_dim = int(hidden_dim)
        self.num_layers = int(num_layers)
        self.channels: List[Tuple[Relation, bool]] = [
            (r, reverse) for r in self.relations for reverse in (False, True)
        ]
        self.params = params if params is not None else self._init_params(rng or np.random.default_rng(0))

    @classmethod
    def for_graph(cls, graph: HeteroGraph, primary_type: str, num_classes: int, **kwargs) -> "RelationalClassifier":
        dims = {t: graph.feature_dim(t) for t in graph.node_types}
        return cls(dims, graph.relations, primary_type, num_classes, **kwargs)

    def _init_params(self, rng: np.random.Generator) -> ParameterSet:
        params = ParameterSet()
        d_h = self.hidden_dim
        for node_type in sorted(self.type_dims):
            dim = self.type_dims[node_type]
            params.add(f"proj.{node_type}.W", glorot_uniform(rng, dim, d_h))
            params.add(f"proj.{node_type}.b", np.zeros(d_h))
        for layer in range(self.num_layers):
            params.add(f"layer{layer}.self", glorot_uniform(rng, d_h, d_h))
            for relation, reverse in sorted(self.channels, key=lambda c: _channel_name(*c)):
                params.add(f"layer{layer}.{_channel_name(relation, reverse)}", glorot_uniform(rng, d_h, d_h))
        params.add("head.W", glorot_uniform(rng, d_h, self.num_classes))
        params.add("head.b", np.zeros(self.num_classes))
        return params

    def copy(self) -> "RelationalClassifier":
        return RelationalClassifier(self.type_dims, self.relations, self.primary_type, self.num_classes,
                                    self.hidden_dim, self.num_layers, params=self.params.copy())

    # --- propagation ---

    def _check_graph(self, graph: HeteroGraph) -> None:
        for node_type, dim in self.type_dims.items():
            if node_type not in graph.node_types:
                raise SchemaError(f"Type {node_type} absent du graphe")
            if graph.feature_dim(node_type) != dim:
                raise SchemaError(f"Type {node_type}: largeur {graph.feature_dim(node_type)} au lieu de {dim}")
        missing = set(self.relations) - set(graph.relations)
        if missing:
            raise SchemaError(f"Relations absentes du graphe: {sorted(r.name for r in missing)}")

    def _aggregate(self, graph: HeteroGraph, relation: Relation, reverse: bool, h_source: Tensor,
                   soft: Optional[SoftTriggerRows]) -> Tensor:
        operator = graph.mean_operator(relation, reverse)
        if soft is None or reverse or relation not in soft.rows:
            return dm.mean_over_neighbors(operator, h_source, normalized=True)
        pool_ids, selection, budget = soft.rows[relation]
        clean_rows = dm.mean_over_neighbors(operator[:soft.start], h_source, normalized=True)
        injected = dm.scale(dm.matmul(selection, dm.take_rows(h_source, pool_ids)), 1.0 / budget)
        return dm.concat([clean_rows, injected], axis=0)

    def hidden(self, graph: HeteroGraph, features: Optional[FeatureOverride] = None,
               soft: Optional[SoftTriggerRows] = None,
               params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """Représentations finales des nœuds principaux (n_p x d_h)"""
        self._check_graph(graph)
        p = params if params is not None else self.params
        features = features or {}

        h: Dict[str, Tensor] = {}
        for node_type in self.type_dims:
            x = features.get(node_type)
            x = dm.constant(graph.features(node_type)) if x is None else dm.as_tensor(x)
            if x.shape != (graph.num_nodes(node_type), self.type_dims[node_type]):
                raise SchemaError(f"Features {node_type}: forme {x.shape} incohérente avec le graphe")
            h[node_type] = dm.add(dm.matmul(x, p[f"proj.{node_type}.W"]), p[f"proj.{node_type}.b"])

        for layer in range(self.num_layers):
            last = layer == self.num_layers - 1
            updated: Dict[str, Tensor] = {}
            for node_type in self.type_dims:
                if last and node_type != self.primary_type:
                    continue
                pre = dm.matmul(h[node_type], p[f"layer{layer}.self"])
                for relation, reverse in self.channels:
                    target = relation.dst if reverse else relation.src
                    if target != node_type:
                        continue
                    source = relation.src if reverse else relation.dst
                    agg = self._aggregate(graph, relation, reverse, h[source], soft)
                    pre = dm.add(pre, dm.matmul(agg, p[f"layer{layer}.{_channel_name(relation, reverse)}"]))
                updated[node_type] = dm.gelu(dm.layer_norm(pre))
            h = updated
        return h[self.primary_type]

    def forward(self, graph: HeteroGraph, features: Optional[FeatureOverride] = None,
                soft: Optional[SoftTriggerRows] = None,
                params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """
        Logits des nœuds principaux

        Args:
            graph: Graphe (propre ou empoisonné)
            features: Remplacement différentiable des features de certains types
            soft: Lignes d'agrégation différentiables des déclencheurs injectés
            params: Paramètres à utiliser (par défaut ceux du modèle; vue gelée possible)

        Returns:
            Tensor: Logits (n_p x |Y|)
        """
        p = params if params is not None else self.params
        h = self.hidden(graph, features, soft, params)
        return dm.add(dm.matmul(h, p["head.W"]), p["head.b"])

    def predict(self, graph: HeteroGraph, **kwargs) -> np.ndarray:
        """Classe prédite par nœud principal (égalité → plus petit identifiant de classe)"""
        return np.argmax(self.forward(graph, **kwargs).value, axis=1)

    def embed(self, graph: HeteroGraph) -> np.ndarray:
        return self.hidden(graph).numpy()

    # --- persistance ---

    def to_payload(self) -> Dict:
        return {
            'format_version': CHECKPOINT_FORMAT_VERSION,
            'kind': 'relational_classifier',
            'architecture': {
                'type_dims': self.type_dims,
                'relations': [[r.src, r.dst] for r in self.relations],
                'primary_type': self.primary_type,
                'num_classes': self.num_classes,
                'hidden_dim': self.hidden_dim,
                'num_layers': self.num_layers,
            },
            'params': self.params.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "RelationalClassifier":
        if payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(f"Version de checkpoint non supportée: {payload.get('format_version')}")
        arch = payload['architecture']
        return cls(arch['type_dims'], [Relation(s, d) for s, d in arch['relations']], arch['primary_type'],
                   arch['num_classes'], arch['hidden_dim'], arch['num_layers'],
                   params=ParameterSet.from_payload(payload['params']))


# =====================================================
# ÉVALUATION ET GRADIENTS D'ENTRÉE
# =====================================================

def accuracy(model: RelationalClassifier, graph: HeteroGraph, labels: np.ndarray, nodes: Sequence[int]) -> float:
    """Exactitude sur un sous-ensemble de nœuds principaux"""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ConfigurationError("Ensemble d'évaluation vide")
    predictions = model.predict(graph)
    return float(np.mean(predictions[nodes] == np.asarray(labels)[nodes]))


def input_gradients(model: RelationalClassifier, graph: HeteroGraph, nodes: Sequence[int],
                    class_id: int) -> Iterator[Tuple[int, Dict[str, np.ndarray]]]:
    """
    Gradients de logit(v, c) par rapport aux features de tous les nœuds, pour chaque v de `nodes`

    Une seule propagation avant est enregistrée; chaque nœud déclenche un balayage inverse.
    """
    if not 0 <= class_id < model.num_classes:
        raise SchemaError(f"Classe {class_id} hors de [0, {model.num_classes})")
    inputs = {t: Tensor(graph.features(t), requires_grad=True) for t in model.type_dims}
    with Tape() as tape:
        logits = model.forward(graph, features=inputs, params=model.params.frozen())
    n_primary = logits.shape[0]
    for node in nodes:
        node = int(node)
        if not 0 <= node < n_primary:
            raise SchemaError(f"Nœud principal {node} hors bornes")
        seed = np.zeros(logits.shape)
        seed[node, class_id] = 1.0
        yield node, tape.gradient(logits, inputs, seed=seed)


def input_gradient(model: RelationalClassifier, graph: HeteroGraph, v_p: int, class_id: int) -> Dict[str, np.ndarray]:
    """Gradient de logit(v_p, c) par rapport aux features d'entrée de chaque type"""
    _, grads = next(input_gradients(model, graph, [v_p], class_id))
    return grads


# =====================================================
# ENTRAÎNEMENT PROPRE
# =====================================================

def train_clean(model: RelationalClassifier, graph: HeteroGraph, labels: np.ndarray, split: Split,
                epochs: int = CLEAN_EPOCHS, lr: float = CLEAN_LEARNING_RATE,
                weight_decay: float = WEIGHT_DECAY) -> Tuple[RelationalClassifier, pd.DataFrame]:
    """
    Entraîne une copie du modèle par entropie croisée sur le train et garde la meilleure validation

    Args:
        model: Modèle initial (non modifié)
        graph: Graphe d'entraînement
        labels: Étiquettes des nœuds principaux
        split: Découpage train/test/val
        epochs: Nombre d'époques (0 → modèle initial)

    Returns:
        Tuple[RelationalClassifier, pd.DataFrame]: Modèle retenu et trace (epoch, loss, train_acc, val_acc)

    Raises:
        ConfigurationError: Si une partie du découpage est vide
    """
    for part, nodes in (('train', split.train), ('test', split.test), ('val', split.val)):
        if len(nodes) == 0:
            raise ConfigurationError(f"Partie '{part}' du découpage vide")

    trained = model.copy()
    trace = pd.DataFrame(columns=['epoch', 'loss', 'train_acc', 'val_acc'])
    if epochs <= 0:
        return trained, trace

    labels = np.asarray(labels, dtype=np.int64)
    optimizer = AdamW(trained.params, lr=lr, weight_decay=weight_decay, clip=GRADIENT_CLIP)
    best_val, best_snapshot = -1.0, trained.params.snapshot()
    rows = []

    logger.info(f"🔄 Entraînement propre: {epochs} époques, {len(split.train)} nœuds d'entraînement")
    for epoch in range(1, epochs + 1):
        with Tape() as tape:
            logits = trained.forward(graph)
            loss = dm.cross_entropy(logits, labels[split.train], rows=split.train, reduction='mean')
        optimizer.step(tape.gradient(loss, trained.params))

        predictions = trained.predict(graph)
        train_acc = float(np.mean(predictions[split.train] == labels[split.train]))
        val_acc = float(np.mean(predictions[split.val] == labels[split.val]))
        rows.append({'epoch': epoch, 'loss': loss.item(), 'train_acc': train_acc, 'val_acc': val_acc})
        if val_acc > best_val:
            best_val, best_snapshot = val_acc, trained.params.snapshot()

    trained.params.restore(best_snapshot)
    trace = pd.DataFrame(rows, columns=['epoch', 'loss', 'train_acc', 'val_acc'])
    logger.info(f"✅ Entraînement terminé: meilleure exactitude de validation {best_val:.4f}")
    return trained, trace
