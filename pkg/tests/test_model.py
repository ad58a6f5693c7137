from __future__ import annotations

import math

import numpy as np
import pytest

from diffpool import tensor as T
from diffpool.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from diffpool.graphs import Graph, pad_batch
from diffpool.model import (
    ConfigError, ModelConfig, build_model, cluster_sizes, forward, forward_arrays, forward_padded,
    permutation_invariance_check, predict, total_loss,
)

from conftest import random_graph


def small_config(**kw):
    base = dict(hidden_dim=8, gnn_layers_per_block=2, num_diffpool_layers=2, cluster_ratio=0.25,
                num_classes=3, max_nodes=12)
    base.update(kw)
    return ModelConfig(**base)


def test_cluster_sizes_default_ratio():
    assert cluster_sizes(ModelConfig(max_nodes=100, cluster_ratio=0.25)) == [25, 7]
    assert cluster_sizes(ModelConfig(max_nodes=60, cluster_ratio=0.1, num_diffpool_layers=1)) == [6]
    assert cluster_sizes(ModelConfig(max_nodes=3, cluster_ratio=0.1, num_diffpool_layers=3)) == [1, 1, 1]


@pytest.mark.parametrize("kw", [dict(cluster_ratio=0.0), dict(cluster_ratio=1.5),
                                dict(num_diffpool_layers=-1), dict(gnn_layers_per_block=0),
                                dict(readout="max"), dict(assignment_mode="random"),
                                dict(bn_inference="batch"), dict(gnn_variant="gat")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_forward_shapes(rng):
    g = random_graph(rng, 12, 0.3, label=1)
    model = build_model(small_config(), g.features.shape[1], seed=0)
    res = forward(model, g, training=True)
    assert res.logits.shape == (1, 3)
    assert [s.shape for s in res.assignments] == [(12, 3), (3, 1)]
    assert [a.shape for a in res.coarse_adjacencies] == [(3, 3), (1, 1)]
    assert res.graph_embedding.shape == (1, 8 * 3)
    assert len(res.aux_losses) == 2


def test_final_only_readout(rng):
    g = random_graph(rng, 10, 0.3)
    model = build_model(small_config(readout="final_only"), g.features.shape[1])
    assert forward(model, g).graph_embedding.shape == (1, 8)


def test_flat_baseline_has_no_pooling(rng):
    g = random_graph(rng, 10, 0.3)
    model = build_model(small_config(num_diffpool_layers=0), g.features.shape[1])
    res = forward(model, g)
    assert res.assignments == [] and res.aux_losses == []
    assert res.graph_embedding.shape == (1, 8)


def test_untrained_loss_near_log_classes(rng):
    losses = []
    for i in range(10):
        g = random_graph(rng, 12, 0.3, label=i % 3)
        model = build_model(small_config(), g.features.shape[1], seed=i)
        losses.append(forward(model, g, training=True).classification_loss.item())
    assert abs(np.mean(losses) - math.log(3)) < 0.5


def test_permutation_invariance(rng):
    g = random_graph(rng, 12, 0.3)
    model = build_model(small_config(), g.features.shape[1], seed=3)
    assert permutation_invariance_check(model, g, trials=10, seed=1) < 1e-9


def test_deterministic_pooling_invariant_without_ties():
    # two cliques of different sizes joined by one edge: the matching has no ties
    a = np.zeros((7, 7))
    a[:3, :3] = 1.0
    a[3:, 3:] = 1.0
    np.fill_diagonal(a, 0.0)
    a[2, 3] = a[3, 2] = 1.0
    from diffpool.graphs import augment_features
    g = augment_features(Graph(adjacency=a, features=np.zeros((7, 0)), label=0))
    model = build_model(small_config(assignment_mode="deterministic", max_nodes=7,
                                     cluster_ratio=0.3, num_diffpool_layers=1),
                        g.features.shape[1], seed=3)
    assert permutation_invariance_check(model, g, trials=10, seed=1) < 1e-9


def test_permutation_negative_control(rng):
    # a positional feature attached after relabelling breaks equivariance, and the check notices
    g = random_graph(rng, 12, 0.3)
    model = build_model(small_config(), g.features.shape[1] + 1, seed=3)

    def with_index(m, graph):
        x = np.hstack([graph.features, np.arange(graph.n, dtype=float)[:, None]])
        return forward_arrays(m, graph.adjacency, x)

    assert permutation_invariance_check(model, g, trials=10, seed=1, forward_fn=with_index) > 1e-6


def test_permutation_check_preserves_running_stats(rng):
    g = random_graph(rng, 12, 0.3)
    model = build_model(small_config(bn_inference="running"), g.features.shape[1])
    before = {k: s.mean.copy() for k, s in model.named_stats().items()}
    permutation_invariance_check(model, g, trials=3, training=True)
    for k, s in model.named_stats().items():
        np.testing.assert_array_equal(s.mean, before[k])


def test_padded_forward_matches_unpadded(rng):
    graphs = [random_graph(rng, n, 0.4, label=n % 3) for n in (6, 9, 12)]
    model = build_model(small_config(), graphs[0].features.shape[1], seed=2)
    batch = pad_batch(graphs, 12)
    for training in (False, True):
        padded = forward_padded(model, batch, training=training)
        for g, res in zip(graphs, padded):
            ref = forward(model, g, training=training)
            np.testing.assert_allclose(res.logits.data, ref.logits.data, atol=1e-9)
            for (lp1, e1), (lp2, e2) in zip(res.aux_losses, ref.aux_losses):
                assert abs(lp1.item() - lp2.item()) <= 1e-9
                assert abs(e1.item() - e2.item()) <= 1e-9


def test_feature_width_checked(rng):
    g = random_graph(rng, 6, 0.5)
    model = build_model(small_config(), g.features.shape[1] + 1)
    with pytest.raises(T.ShapeError):
        forward(model, g)


def test_total_loss_weights(rng):
    g = random_graph(rng, 12, 0.3)
    model = build_model(small_config(), g.features.shape[1])
    res = forward(model, g, training=True)
    ce = res.classification_loss.item()
    aux = sum(lp.item() + e.item() for lp, e in res.aux_losses)
    assert total_loss(res, (0.0, 0.0)).item() == ce
    assert total_loss(res).item() == pytest.approx(ce + aux, abs=1e-12)
    assert total_loss(res).item() >= ce


def test_variants_disable_aux_losses(rng):
    g = random_graph(rng, 12, 0.3)
    model = build_model(small_config(use_link_pred=False, use_entropy=False),
                        g.features.shape[1])
    res = forward(model, g, training=True)
    assert total_loss(res).item() == res.classification_loss.item()


def test_gradient_reaches_every_parameter(rng):
    g = random_graph(rng, 12, 0.4)
    model = build_model(small_config(cluster_ratio=0.5), g.features.shape[1], seed=4)
    params = model.parameters()
    with T.Tape() as tape:
        T.backward(total_loss(forward(model, g, training=True)), tape, params)
    assert all(p.grad is not None and p.grad.shape == p.shape for p in params)
    # deeper levels can lose signal to dead units; the input level and classifier cannot
    for p in params:
        if p.name.endswith("weight") and p.name.startswith(("level0.", "mlp.")):
            assert np.any(p.grad), p.name


def test_forward_arrays_requires_label_for_loss(rng):
    g = random_graph(rng, 8, 0.4)
    model = build_model(small_config(), g.features.shape[1])
    res = forward_arrays(model, g.adjacency, g.features)
    assert res.classification_loss is None
    assert predict(model, g) in range(3)


def test_checkpoint_round_trip(tmp_path, rng):
    g = random_graph(rng, 12, 0.3)
    model = build_model(small_config(bn_inference="running"), g.features.shape[1], seed=9)
    forward(model, g, training=True)  # move running statistics off their defaults
    path = tmp_path / "m.npz"
    save_checkpoint(str(path), model, extra={"fold": 2})
    loaded, extra = load_checkpoint(str(path))
    assert extra == {"fold": 2}
    assert loaded.config == model.config
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[k], v)
    np.testing.assert_array_equal(forward(loaded, g).logits.data, forward(model, g).logits.data)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bad))
    np.savez(tmp_path / "nohdr.npz", x=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "nohdr.npz"))
