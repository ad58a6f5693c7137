"""Graphs, TU-format ingestion, structural features and batching."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Graph", "Dataset", "PaddedBatch", "Split",
    "IngestionError", "FormatError", "CapacityError", "StratificationError", "AugmentationError",
    "parse_tu_dataset", "write_tu_dataset", "augment_features", "augment_dataset",
    "clustering_coefficients", "pad_batch", "stratified_kfold", "dataset_statistics",
    "dataset_fingerprint",
]


class IngestionError(OSError):
    """A required dataset file is missing or unreadable."""


class FormatError(ValueError):
    """A dataset file is malformed."""


class CapacityError(ValueError):
    """A graph does not fit in the requested padded size."""


class StratificationError(ValueError):
    """A class has too few members for the requested fold count."""


class AugmentationError(ValueError):
    """Structural features were already appended to this graph."""


@dataclass(frozen=True, eq=False)
class Graph:
    adjacency: np.ndarray
    features: np.ndarray
    label: int
    augmented: bool = False

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that new node i is old node perm[i] (P A P^T, P F)."""
        perm = np.asarray(perm)
        return replace(self, adjacency=self.adjacency[np.ix_(perm, perm)],
                       features=self.features[perm])


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: list[Graph]
    num_classes: int
    feature_dim: int
    name: str = ""
    class_values: tuple = field(default=())

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i: int) -> Graph:
        return self.graphs[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=int)

    @property
    def max_nodes(self) -> int:
        return max(g.n for g in self.graphs)


@dataclass(frozen=True, eq=False)
class PaddedBatch:
    adjacencies: np.ndarray  # (B, n_max, n_max)
    features: np.ndarray  # (B, n_max, d)
    node_mask: np.ndarray  # (B, n_max)
    labels: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.adjacencies.shape[0]

    @property
    def n_max(self) -> int:
        return self.adjacencies.shape[1]


def _read_int_rows(path: Path, width: int) -> list[tuple[int, list[int]]]:
    if not path.is_file():
        raise IngestionError(f"missing dataset file: {path}")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != width:
                raise FormatError(f"{path.name}:{lineno}: expected {width} values, got {text!r}")
            try:
                rows.append((lineno, [int(p) for p in parts]))
            except ValueError:
                raise FormatError(f"{path.name}:{lineno}: not an integer row: {text!r}") from None
    return rows


def parse_tu_dataset(directory, name: Optional[str] = None) -> Dataset:
    """Read a TU-format dataset (``<name>_A.txt`` and friends) from ``directory``.

    Edges are symmetrized and binarized and self-loops dropped. Graph labels are
    relabeled to 0..C-1 in sorted order of the raw values. Node labels, when
    present, become one-hot feature columns; otherwise features are empty
    (n x 0) until :func:`augment_features` adds the structural columns.
    """
    directory = Path(directory)
    name = name or directory.name
    indicator = [v[0] for _, v in _read_int_rows(directory / f"{name}_graph_indicator.txt", 1)]
    raw_labels = [v[0] for _, v in _read_int_rows(directory / f"{name}_graph_labels.txt", 1)]
    edges = _read_int_rows(directory / f"{name}_A.txt", 2)
    node_label_path = directory / f"{name}_node_labels.txt"
    node_labels = None
    if node_label_path.exists():
        node_labels = [v[0] for _, v in _read_int_rows(node_label_path, 1)]
        if len(node_labels) != len(indicator):
            raise FormatError(f"{node_label_path.name}: {len(node_labels)} labels for "
                              f"{len(indicator)} nodes")

    num_nodes = len(indicator)
    num_graphs = len(raw_labels)
    graph_of = np.array(indicator, dtype=np.int64) - 1
    if num_nodes and (graph_of.min() < 0 or graph_of.max() >= num_graphs):
        bad = int(np.argmax((graph_of < 0) | (graph_of >= num_graphs)))
        raise FormatError(f"{name}_graph_indicator.txt:{bad + 1}: graph id {indicator[bad]} "
                          f"outside 1..{num_graphs}")

    # nodes of one graph are contiguous in TU files but we do not rely on it
    local = np.zeros(num_nodes, dtype=np.int64)
    sizes = np.zeros(num_graphs, dtype=np.int64)
    for v in range(num_nodes):
        gid = graph_of[v]
        local[v] = sizes[gid]
        sizes[gid] += 1

    adjs = [np.zeros((s, s), dtype=np.float64) for s in sizes]
    for lineno, (u, v) in edges:
        if not (1 <= u <= num_nodes and 1 <= v <= num_nodes):
            raise FormatError(f"{name}_A.txt:{lineno}: node index outside 1..{num_nodes}")
        gu, gv = graph_of[u - 1], graph_of[v - 1]
        if gu != gv:
            raise FormatError(f"{name}_A.txt:{lineno}: edge joins graphs {gu + 1} and {gv + 1}")
        if u == v:
            continue
        a = adjs[gu]
        a[local[u - 1], local[v - 1]] = 1.0
        a[local[v - 1], local[u - 1]] = 1.0

    classes = sorted(set(raw_labels))
    class_index = {c: i for i, c in enumerate(classes)}

    if node_labels is not None:
        node_values = sorted(set(node_labels))
        node_index = {c: i for i, c in enumerate(node_values)}
        onehot = np.zeros((num_nodes, len(node_values)))
        onehot[np.arange(num_nodes), [node_index[c] for c in node_labels]] = 1.0
    else:
        onehot = np.zeros((num_nodes, 0))

    members: list[list[int]] = [[] for _ in range(num_graphs)]
    for v in range(num_nodes):
        members[graph_of[v]].append(v)

    graphs = [Graph(adjacency=adjs[g], features=onehot[members[g]],
                    label=class_index[raw_labels[g]])
              for g in range(num_graphs)]
    return Dataset(graphs=graphs, num_classes=len(classes), feature_dim=onehot.shape[1],
                   name=name, class_values=tuple(classes))


def write_tu_dataset(dataset: Dataset, directory, name: Optional[str] = None,
                     node_labels: Optional[Sequence[Sequence[int]]] = None) -> Path:
    """Write ``dataset`` in TU format. Returns the dataset directory."""
    name = name or dataset.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    values = dataset.class_values or tuple(range(dataset.num_classes))
    edge_lines, indicator_lines, node_label_lines = [], [], []
    offset = 0
    for gi, g in enumerate(dataset.graphs):
        rows, cols = np.nonzero(g.adjacency)
        for r, c in zip(rows, cols):
            edge_lines.append(f"{r + offset + 1}, {c + offset + 1}")
        indicator_lines.extend([str(gi + 1)] * g.n)
        if node_labels is not None:
            node_label_lines.extend(str(int(x)) for x in node_labels[gi])
        offset += g.n
    (directory / f"{name}_A.txt").write_text("\n".join(edge_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(indicator_lines) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(values[g.label]) for g in dataset.graphs) + "\n")
    if node_labels is not None:
        (directory / f"{name}_node_labels.txt").write_text("\n".join(node_label_lines) + "\n")
    return directory


def clustering_coefficients(adjacency: np.ndarray) -> np.ndarray:
    a = (adjacency != 0).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    triangles = np.einsum("ij,jk,ki->i", a, a, a) / 2.0
    denom = deg * (deg - 1.0)
    return np.where(deg >= 2, 2.0 * triangles / np.where(denom > 0, denom, 1.0), 0.0)


def augment_features(g: Graph) -> Graph:
    """Append node degree and local clustering coefficient as two feature columns."""
    if g.augmented:
        raise AugmentationError("structural features already appended")
    deg = (g.adjacency != 0).sum(axis=1).astype(np.float64)
    cc = clustering_coefficients(g.adjacency)
    features = np.concatenate([g.features, deg[:, None], cc[:, None]], axis=1)
    return replace(g, features=features, augmented=True)


def augment_dataset(ds: Dataset) -> Dataset:
    graphs = [augment_features(g) for g in ds.graphs]
    return replace(ds, graphs=graphs, feature_dim=ds.feature_dim + 2)


def pad_batch(graphs: Sequence[Graph], n_max: Optional[int] = None) -> PaddedBatch:
    if not graphs:
        raise ValueError("pad_batch needs at least one graph")
    biggest = max(g.n for g in graphs)
    if n_max is None:
        n_max = biggest
    if biggest > n_max:
        raise CapacityError(f"graph with {biggest} nodes exceeds n_max={n_max}")
    d = graphs[0].features.shape[1]
    b = len(graphs)
    adj = np.zeros((b, n_max, n_max))
    feats = np.zeros((b, n_max, d))
    mask = np.zeros((b, n_max))
    for i, g in enumerate(graphs):
        adj[i, :g.n, :g.n] = g.adjacency
        feats[i, :g.n] = g.features
        mask[i, :g.n] = 1.0
    labels = np.array([g.label for g in graphs], dtype=int)
    return PaddedBatch(adjacencies=adj, features=feats, node_mask=mask, labels=labels)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def stratified_kfold(labels, k: int, seed: int, validation_fraction: float = 0.1) -> list[Split]:
    """Stratified k-fold splits, each with a stratified validation hold-out.

    Test folds partition the indices. Per class, shuffled members are dealt
    round-robin onto folds, continuing where the previous class stopped so fold
    sizes stay within one graph of each other. From each fold's remaining
    graphs, round(fraction * class count) members per class (at least one when
    the class has two or more) are held out for validation.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    for c, cnt in zip(classes, counts):
        if cnt < k:
            raise StratificationError(f"class {c} has {cnt} members, fewer than k={k}")

    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        for idx in members:
            folds[cursor % k].append(int(idx))
            cursor += 1

    splits = []
    for f in range(k):
        test = np.array(sorted(folds[f]), dtype=int)
        rest = np.array(sorted(i for g in range(k) if g != f for i in folds[g]), dtype=int)
        val = []
        for c in classes:
            pool = rest[labels[rest] == c]
            take = int(math.floor(validation_fraction * len(pool) + 0.5))
            if take == 0 and len(pool) >= 2:
                take = 1
            val.extend(rng.choice(pool, size=take, replace=False).tolist())
        val = np.array(sorted(val), dtype=int)
        train = np.setdiff1d(rest, val)
        splits.append(Split(train=train, validation=val, test=test))
    return splits


def dataset_statistics(ds: Dataset) -> dict:
    nodes = np.array([g.n for g in ds.graphs], dtype=float)
    edges = np.array([g.num_edges for g in ds.graphs], dtype=float)
    return {
        "graphs": len(ds.graphs),
        "classes": ds.num_classes,
        "mean_nodes": float(nodes.mean()),
        "mean_edges": float(edges.mean()),
        "max_nodes": int(nodes.max()),
    }


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.name.encode())
    for g in ds.graphs:
        h.update(np.int64(g.n).tobytes())
        h.update(np.int64(g.label).tobytes())
        h.update(np.ascontiguousarray(g.adjacency).tobytes())
        h.update(np.ascontiguousarray(g.features).tobytes())
    return h.hexdigest()
