"""Per-level cluster assignments for offline inspection (JSON or Graphviz dot)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graphs import Dataset
from .model import HierarchicalModel, forward

__all__ = [
    "LevelAssignment", "GraphAssignments", "AssignmentExport",
    "export_assignments", "to_json", "from_json", "to_dot", "EXPORT_VERSION",
]

EXPORT_VERSION = 1

# enough distinct fill colours for the default first-level cluster counts
_PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896",
    "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
]


@dataclass
class LevelAssignment:
    level: int
    n_clusters: int
    memberships: list[int]
    effective_clusters: int
    coarse_adjacency: list[list[float]]
    assignment: Optional[list[list[float]]] = None

    def __post_init__(self):
        if any(not 0 <= c < self.n_clusters for c in self.memberships):
            raise ValueError(f"level {self.level}: membership outside [0, {self.n_clusters})")
        if self.effective_clusters > self.n_clusters:
            raise ValueError("effective cluster count exceeds configured cluster count")


@dataclass
class GraphAssignments:
    index: int
    label: int
    num_nodes: int
    levels: list[LevelAssignment] = field(default_factory=list)


@dataclass
class AssignmentExport:
    graphs: list[GraphAssignments]
    version: int = EXPORT_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "graphs": [{
                "index": g.index, "label": g.label, "num_nodes": g.num_nodes,
                "levels": [{k: v for k, v in vars(lv).items()
                            if not (k == "assignment" and v is None)} for lv in g.levels],
            } for g in self.graphs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AssignmentExport":
        graphs = [GraphAssignments(index=g["index"], label=g["label"], num_nodes=g["num_nodes"],
                                   levels=[LevelAssignment(**lv) for lv in g["levels"]])
                  for g in data["graphs"]]
        return cls(graphs=graphs, version=data.get("version", EXPORT_VERSION))


def export_assignments(model: HierarchicalModel, dataset: Dataset, indices: Sequence[int],
                       *, include_soft: bool = False) -> AssignmentExport:
    """Forward each selected graph and record argmax memberships per pooling level.

    Level ``l`` memberships map the nodes of level ``l - 1`` (the input graph
    for level 1) to the clusters of level ``l``.
    """
    records = []
    for i in indices:
        if not 0 <= i < len(dataset):
            raise IndexError(f"graph index {i} out of range for {len(dataset)} graphs")
        g = dataset.graphs[i]
        res = forward(model, g, training=False)
        levels = []
        for lvl, (s, a) in enumerate(zip(res.assignments, res.coarse_adjacencies), start=1):
            sd = s.data
            members = np.argmax(sd, axis=1).astype(int).tolist()
            levels.append(LevelAssignment(
                level=lvl, n_clusters=sd.shape[1], memberships=members,
                effective_clusters=len(set(members)),
                coarse_adjacency=a.data.tolist(),
                assignment=sd.tolist() if include_soft else None,
            ))
        records.append(GraphAssignments(index=int(i), label=int(g.label), num_nodes=g.n,
                                        levels=levels))
    return AssignmentExport(graphs=records)


def to_json(export: AssignmentExport) -> str:
    return json.dumps(export.to_dict(), indent=1)


def from_json(text: str) -> AssignmentExport:
    return AssignmentExport.from_dict(json.loads(text))


def to_dot(export: AssignmentExport, dataset: Dataset) -> str:
    """One undirected graph per record, nodes filled by level-1 cluster."""
    out = []
    for rec in export.graphs:
        a = dataset.graphs[rec.index].adjacency
        out.append(f"graph g{rec.index} {{")
        out.append(f'  label="graph {rec.index} (class {rec.label})";')
        out.append("  node [style=filled];")
        members = rec.levels[0].memberships if rec.levels else [0] * rec.num_nodes
        for v, c in enumerate(members):
            out.append(f'  n{v} [label="{v}", fillcolor="{_PALETTE[c % len(_PALETTE)]}", '
                       f'tooltip="cluster {c}"];')
        rows, cols = np.nonzero(np.triu(a, 1))
        for u, v in zip(rows.tolist(), cols.tolist()):
            out.append(f"  n{u} -- n{v};")
        out.append("}")
    return "\n".join(out) + "\n"
