"""Hierarchical graph classifier: GNN blocks, DiffPool levels, readout and MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .graphs import Graph, PaddedBatch
from .layers import GnnModule, gnn_forward, make_gnn_module
from .pooling import DiffPoolLayer, diffpool_forward, readout_assignment
from .tensor import Parameter, RunningStats, Tensor

__all__ = [
    "ModelConfig", "ConfigError", "Classifier", "HierarchicalModel", "ForwardResult",
    "build_model", "cluster_sizes", "forward", "forward_padded", "total_loss",
    "permutation_invariance_check", "predict",
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    gnn_layers_per_block: int = 2
    num_diffpool_layers: int = 2
    cluster_ratio: float = 0.25
    gnn_variant: str = "graphsage_mean"
    use_bn: bool = True
    bn_inference: str = "graph"
    use_l2_norm: bool = True
    use_link_pred: bool = True
    use_entropy: bool = True
    readout: str = "concat_all_levels"
    assignment_mode: str = "learned"
    num_classes: int = 2
    max_nodes: int = 100

    def __post_init__(self):
        if not 0 < self.cluster_ratio <= 1:
            raise ConfigError(f"cluster_ratio must lie in (0, 1], got {self.cluster_ratio}")
        if self.num_diffpool_layers < 0:
            raise ConfigError("num_diffpool_layers must be >= 0")
        if self.gnn_layers_per_block < 1:
            raise ConfigError("gnn_layers_per_block must be >= 1")
        if self.hidden_dim < 1 or self.num_classes < 1:
            raise ConfigError("hidden_dim and num_classes must be positive")
        if self.readout not in ("concat_all_levels", "final_only"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.assignment_mode not in ("learned", "deterministic"):
            raise ConfigError(f"unknown assignment_mode {self.assignment_mode!r}")
        if self.bn_inference not in ("graph", "running"):
            raise ConfigError(f"unknown bn_inference {self.bn_inference!r}")
        if self.gnn_variant not in ("gcn", "graphsage_mean"):
            raise ConfigError(f"unknown gnn_variant {self.gnn_variant!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def cluster_sizes(config: ModelConfig) -> list[int]:
    """Cluster count per DiffPool level: ceil(ratio * previous budget), floor 1."""
    if config.max_nodes < 1:
        raise ConfigError("max_nodes must be positive to size the first pooling level")
    sizes, budget = [], config.max_nodes
    for _ in range(config.num_diffpool_layers):
        # round first so 0.1 * 60 does not ceil to 7
        budget = max(1, math.ceil(round(config.cluster_ratio * budget, 9)))
        sizes.append(budget)
    return sizes


@dataclass
class Classifier:
    """Two-layer perceptron: ReLU(x W1 + b1) W2 + b2."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


@dataclass
class HierarchicalModel:
    config: ModelConfig
    feature_dim: int
    pools: list[DiffPoolLayer]
    final_gnn: GnnModule
    classifier: Classifier

    def parameters(self) -> list[Parameter]:
        params = [p for layer in self.pools for p in layer.parameters()]
        return params + self.final_gnn.parameters() + self.classifier.parameters()

    def all_parameters(self) -> list[Parameter]:
        """Every parameter including unused pooling GNNs (checkpointing)."""
        params = []
        for layer in self.pools:
            params += layer.embed_gnn.parameters() + layer.pool_gnn.parameters()
        return params + self.final_gnn.parameters() + self.classifier.parameters()

    def named_stats(self) -> dict[str, RunningStats]:
        out = {}
        modules = [m for layer in self.pools for m in (layer.embed_gnn, layer.pool_gnn)]
        for module in modules + [self.final_gnn]:
            for k, layer in enumerate(module.layers):
                out[f"{module.name}.{k}"] = layer.stats
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.all_parameters()}
        for name, st in self.named_stats().items():
            state[f"{name}.running_mean"] = st.mean.copy()
            state[f"{name}.running_var"] = st.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.all_parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name!r}")
            if state[p.name].shape != p.shape:
                raise T.ShapeError(f"{p.name}: expected {p.shape}, got {state[p.name].shape}")
            p.data[...] = state[p.name]
        for name, st in self.named_stats().items():
            st.mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            st.var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    @property
    def embedding_dim(self) -> int:
        levels = len(self.pools) + 1
        if self.config.readout == "concat_all_levels" and self.pools:
            return self.config.hidden_dim * levels
        return self.config.hidden_dim


@dataclass
class ForwardResult:
    logits: Tensor
    classification_loss: Optional[Tensor]
    aux_losses: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    assignments: list[Tensor] = field(default_factory=list)
    coarse_adjacencies: list[Tensor] = field(default_factory=list)
    graph_embedding: Optional[Tensor] = None


def build_model(config: ModelConfig, feature_dim: int, seed: int = 0) -> HierarchicalModel:
    if feature_dim < 1:
        raise ConfigError("feature_dim must be at least 1")
    rng = np.random.default_rng(seed)
    hid, k = config.hidden_dim, config.gnn_layers_per_block
    common = dict(variant=config.gnn_variant, use_bn=config.use_bn,
                  use_l2_norm=config.use_l2_norm, bn_inference=config.bn_inference)
    pools = []
    d_in = feature_dim
    for level, n_clusters in enumerate(cluster_sizes(config)):
        embed = make_gnn_module([d_in] + [hid] * k, rng, name=f"level{level}.embed", **common)
        assign = make_gnn_module([d_in] + [hid] * (k - 1) + [n_clusters], rng,
                                 linear_output=True, name=f"level{level}.pool", **common)
        pools.append(DiffPoolLayer(embed_gnn=embed, pool_gnn=assign, n_clusters=n_clusters,
                                   use_link_pred=config.use_link_pred,
                                   use_entropy=config.use_entropy,
                                   assignment_mode=config.assignment_mode))
        d_in = hid
    final = make_gnn_module([d_in] + [hid] * k, rng, name=f"level{len(pools)}.embed", **common)

    emb_dim = hid * (len(pools) + 1) if (config.readout == "concat_all_levels" and pools) else hid
    b1, b2 = 1.0 / np.sqrt(emb_dim), 1.0 / np.sqrt(hid)
    classifier = Classifier(
        w1=Parameter("mlp.0.weight", rng.uniform(-b1, b1, size=(emb_dim, hid))),
        b1=Parameter("mlp.0.bias", np.zeros((1, hid))),
        w2=Parameter("mlp.1.weight", rng.uniform(-b2, b2, size=(hid, config.num_classes))),
        b2=Parameter("mlp.1.bias", np.zeros((1, config.num_classes))),
    )
    return HierarchicalModel(config=config, feature_dim=feature_dim, pools=pools,
                             final_gnn=final, classifier=classifier)


def _masked_mean(z: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None:
        return T.row_mean(z)
    weights = Tensor(mask.T / mask.sum())
    return T.matmul(weights, z)


def forward_arrays(model: HierarchicalModel, adjacency: np.ndarray, features: np.ndarray,
                   label: Optional[int] = None, *, training: bool = False,
                   mask: Optional[np.ndarray] = None) -> ForwardResult:
    if features.shape[1] != model.feature_dim:
        raise T.ShapeError(f"model expects {model.feature_dim} feature columns, "
                           f"got {features.shape[1]}")
    a = Tensor(adjacency)
    x = Tensor(features)
    readouts, aux, assignments, coarse = [], [], [], []
    level_mask = mask
    for layer in model.pools:
        out = diffpool_forward(layer, a, x, training=training, mask=level_mask)
        readouts.append(_masked_mean(out.embeddings, level_mask))
        aux.append((out.link_pred_loss, out.entropy_loss))
        assignments.append(out.assignment)
        coarse.append(out.coarse_adjacency)
        a, x = out.coarse_adjacency, out.coarse_features
        level_mask = None

    z = gnn_forward(model.final_gnn, a, x, training=training, mask=level_mask)
    if model.pools:
        final = T.matmul(T.transpose(readout_assignment(z.rows)), z)
    else:
        final = _masked_mean(z, level_mask)
    if model.config.readout == "concat_all_levels" and model.pools:
        embedding = T.hconcat(readouts + [final])
    else:
        embedding = final
    logits = model.classifier(embedding)
    loss = None if label is None else T.cross_entropy_from_logits(logits, int(label))
    return ForwardResult(logits=logits, classification_loss=loss, aux_losses=aux,
                         assignments=assignments, coarse_adjacencies=coarse,
                         graph_embedding=embedding)


def forward(model: HierarchicalModel, g: Graph, *, training: bool = False) -> ForwardResult:
    """Run the model on one graph. ``training`` selects batch-norm batch statistics."""
    return forward_arrays(model, g.adjacency, g.features, g.label, training=training)


def forward_padded(model: HierarchicalModel, batch: PaddedBatch, *, training: bool = False
                   ) -> list[ForwardResult]:
    """Per-graph forward over a zero-padded batch, ignoring padded nodes."""
    results = []
    for i in range(batch.size):
        mask = batch.node_mask[i][:, None]
        results.append(forward_arrays(model, batch.adjacencies[i], batch.features[i],
                                      int(batch.labels[i]), training=training, mask=mask))
    return results


def predict(model: HierarchicalModel, g: Graph) -> int:
    return int(np.argmax(forward(model, g).logits.data[0]))


def total_loss(result: ForwardResult, weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """Classification loss + w_lp * sum(L_LP) + w_e * sum(L_E)."""
    loss = result.classification_loss
    w_lp, w_e = weights
    for lp, ent in result.aux_losses:
        if w_lp:
            loss = T.add(loss, T.scale(lp, w_lp))
        if w_e:
            loss = T.add(loss, T.scale(ent, w_e))
    return loss


def permutation_invariance_check(model: HierarchicalModel, g: Graph, trials: int = 20,
                                 seed: int = 0, *, training: bool = False,
                                 forward_fn: Optional[Callable] = None) -> float:
    """Largest |logit difference| between ``g`` and randomly relabelled copies."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    run = forward_fn or (lambda m, graph: forward(m, graph, training=training))
    saved = {k: (s.mean.copy(), s.var.copy()) for k, s in model.named_stats().items()}
    rng = np.random.default_rng(seed)
    try:
        base = run(model, g).logits.data
        worst = 0.0
        for _ in range(trials):
            perm = rng.permutation(g.n)
            other = run(model, g.permuted(perm)).logits.data
            worst = max(worst, float(np.abs(other - base).max()))
    finally:
        for k, s in model.named_stats().items():
            s.mean, s.var = saved[k]
    return worst
