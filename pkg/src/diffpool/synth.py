"""Planted-hierarchy benchmark: coarse vs fine community structure.

Class 0 graphs have two communities of 30 nodes, class 1 graphs six
communities of 10. Edge probabilities are chosen per class so that mean degree
and mean clustering coefficient roughly agree across classes; what separates
the classes is how the communities are arranged, not local statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import Dataset, Graph, clustering_coefficients

__all__ = ["PlantedHierarchy", "planted_partition_graph", "planted_hierarchy_dataset",
           "is_connected", "class_statistics"]


@dataclass(frozen=True)
class PlantedHierarchy:
    nodes: int = 60
    # (community count, p_in, p_out) per class
    coarse: tuple[int, float, float] = (2, 0.30, 0.05)
    fine: tuple[int, float, float] = (6, 0.55, 0.105)


def is_connected(adjacency: np.ndarray) -> bool:
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    frontier = np.array([0])
    while frontier.size:
        nxt = np.flatnonzero((adjacency[frontier].sum(axis=0) > 0) & ~seen)
        seen[nxt] = True
        frontier = nxt
    return bool(seen.all())


def planted_partition_graph(n: int, communities: int, p_in: float, p_out: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Symmetric 0/1 adjacency of a planted partition graph, resampled until connected."""
    block = np.repeat(np.arange(communities), n // communities)
    same = block[:, None] == block[None, :]
    probs = np.where(same, p_in, p_out)
    while True:
        upper = np.triu(rng.random((n, n)) < probs, 1)
        a = (upper | upper.T).astype(np.float64)
        if is_connected(a):
            return a


def planted_hierarchy_dataset(num_graphs: int, seed: int,
                              design: PlantedHierarchy = PlantedHierarchy()) -> Dataset:
    if num_graphs < 20 or num_graphs % 2:
        raise ValueError("num_graphs must be an even number >= 20")
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], num_graphs // 2)
    rng.shuffle(labels)
    graphs = []
    for y in labels:
        k, p_in, p_out = design.coarse if y == 0 else design.fine
        a = planted_partition_graph(design.nodes, k, p_in, p_out, rng)
        graphs.append(Graph(adjacency=a, features=np.zeros((design.nodes, 0)), label=int(y)))
    return Dataset(graphs=graphs, num_classes=2, feature_dim=0, name="PLANTED",
                   class_values=(0, 1))


def class_statistics(ds: Dataset) -> dict[int, dict[str, float]]:
    out = {}
    for y in range(ds.num_classes):
        gs = [g for g in ds.graphs if g.label == y]
        dens = [g.adjacency.sum() / (g.n * (g.n - 1)) for g in gs]
        cc = [clustering_coefficients(g.adjacency).mean() for g in gs]
        out[y] = {"density": float(np.mean(dens)), "clustering": float(np.mean(cc))}
    return out
