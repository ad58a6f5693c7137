"""Differentiable pooling: soft assignments, coarsening and auxiliary losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import GnnModule, gnn_forward, propagation_operator
from .tensor import Parameter, Tensor

__all__ = [
    "DiffPoolLayer", "DiffPoolOutput",
    "compute_assignment", "pool", "link_prediction_loss", "entropy_regularizer",
    "diffpool_forward", "readout_assignment", "deterministic_assignment",
]


@dataclass
class DiffPoolLayer:
    embed_gnn: GnnModule
    pool_gnn: GnnModule
    n_clusters: int
    use_link_pred: bool = True
    use_entropy: bool = True
    assignment_mode: str = "learned"

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be at least 1")
        if self.pool_gnn.d_out != self.n_clusters:
            raise T.ShapeError(f"pooling GNN emits {self.pool_gnn.d_out} columns, "
                               f"expected {self.n_clusters}")

    def parameters(self) -> list[Parameter]:
        params = self.embed_gnn.parameters()
        if self.assignment_mode == "learned":
            params += self.pool_gnn.parameters()
        return params


@dataclass
class DiffPoolOutput:
    coarse_adjacency: Tensor
    coarse_features: Tensor
    assignment: Tensor
    link_pred_loss: Tensor
    entropy_loss: Tensor
    embeddings: Tensor


def compute_assignment(layer: DiffPoolLayer, a: Tensor, x: Tensor, *, training: bool = True,
                       mask: Optional[np.ndarray] = None,
                       operator: Optional[Tensor] = None) -> Tensor:
    """S = row_softmax(GNN_pool(A, X)); padded rows (mask 0) are zeroed."""
    logits = gnn_forward(layer.pool_gnn, a, x, training=training, mask=mask, operator=operator)
    s = T.row_softmax(logits)
    if mask is not None:
        s = T.mul(s, Tensor(mask))
    return s


def pool(a: Tensor, z: Tensor, s: Tensor, *, mask: Optional[np.ndarray] = None
         ) -> tuple[Tensor, Tensor]:
    """Coarsen: X' = S^T Z, A' = S^T A S."""
    n = a.rows
    if a.shape != (n, n) or z.rows != n or s.rows != n:
        raise T.ShapeError(f"pool shape mismatch: A {a.shape}, Z {z.shape}, S {s.shape}")
    rowsum = s.data.sum(axis=1)
    expected = np.ones(n) if mask is None else mask[:, 0]
    if np.abs(rowsum - expected).max(initial=0.0) > 1e-6:
        raise T.ContractError("assignment rows must sum to 1")
    st = T.transpose(s)
    return T.matmul(st, z), T.matmul(T.matmul(st, a), s)


def link_prediction_loss(a: Tensor, s: Tensor, n: Optional[int] = None) -> Tensor:
    """||A - S S^T||_F / n^2, with n the number of real nodes."""
    if a.rows != s.rows or a.rows != a.cols:
        raise T.ShapeError(f"link prediction shape mismatch: A {a.shape}, S {s.shape}")
    n = a.rows if n is None else n
    sst = T.matmul(s, T.transpose(s))
    return T.scale(T.frobenius_diff_norm(a, sst), 1.0 / (n * n))


def entropy_regularizer(s: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    return T.row_entropy_mean(s, mask=mask)


def readout_assignment(n: int) -> Tensor:
    """All-ones n x 1 assignment collapsing every node into one cluster."""
    if n < 1:
        raise ValueError("readout assignment needs n >= 1")
    return Tensor(np.ones((n, 1)))


def deterministic_assignment(a, m: int) -> Tensor:
    """Hard assignment from repeated greedy heavy-edge matching.

    Each pass scores cluster pairs with the normalized-cut weight
    ``w_ij / vol_i + w_ij / vol_j`` (``vol`` counts internal weight) and walks
    pairs from heaviest down, ties to the smallest indices. A pair merges only
    when both clusters are still unmatched in this pass and the pair is the
    heaviest edge of both endpoints. Passes repeat until ``m`` clusters remain.
    If no edges are left, leftover clusters are merged in index order.

    Columns are ordered by each cluster's smallest member. The result carries
    no gradient. For ``m >= n`` every node keeps its own cluster and extra
    columns are empty.
    """
    w = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    n = w.shape[0]
    if m < 1:
        raise ValueError(f"number of clusters must be at least 1, got {m}")
    member = np.arange(n)  # cluster id per node; ids are dense 0..count-1
    count = n
    while count > m:
        p = np.zeros((n, count))
        p[np.arange(n), member] = 1.0
        cw = p.T @ w @ p
        vol = cw.sum(axis=1)
        off = cw.copy()
        np.fill_diagonal(off, 0.0)
        iu, ju = np.triu_indices(count, 1)
        wts = off[iu, ju]
        positive = wts > 0
        merges: list[tuple[int, int]] = []
        if positive.any():
            iu, ju, wts = iu[positive], ju[positive], wts[positive]
            safe = np.where(vol > 0, vol, 1.0)
            score = wts / safe[iu] + wts / safe[ju]
            best = np.zeros(count)
            np.maximum.at(best, iu, score)
            np.maximum.at(best, ju, score)
            order = np.lexsort((ju, iu, -score))
            matched = np.zeros(count, dtype=bool)
            remaining = count
            for k in order:
                if remaining <= m:
                    break
                i, j, sc = iu[k], ju[k], score[k]
                if matched[i] or matched[j] or sc < best[i] or sc < best[j]:
                    continue
                matched[i] = matched[j] = True
                merges.append((i, j))
                remaining -= 1
        else:
            # no edges between clusters remain: pair leftovers by index
            ids = list(range(count))
            while count - len(merges) > m and len(ids) >= 2:
                merges.append((ids.pop(0), ids.pop(0)))
        target = np.arange(count)
        for i, j in merges:
            target[j] = i
        _, relabeled = np.unique(target, return_inverse=True)
        member = relabeled[member]
        count = int(relabeled.max()) + 1

    # order clusters by their smallest member
    first = {}
    for v in range(n):
        first.setdefault(int(member[v]), len(first))
    s = np.zeros((n, m))
    s[np.arange(n), [first[int(c)] for c in member]] = 1.0
    return Tensor(s)


def diffpool_forward(layer: DiffPoolLayer, a: Tensor, x: Tensor, *, training: bool = True,
                     mask: Optional[np.ndarray] = None) -> DiffPoolOutput:
    """One DiffPool level: embed, assign, coarsen, and compute auxiliary losses."""
    op = propagation_operator(a, layer.embed_gnn.variant)
    z = gnn_forward(layer.embed_gnn, a, x, training=training, mask=mask, operator=op)
    if layer.assignment_mode == "learned":
        share = op if layer.pool_gnn.variant == layer.embed_gnn.variant else None
        s = compute_assignment(layer, a, x, training=training, mask=mask, operator=share)
    elif layer.assignment_mode == "deterministic":
        s = _masked_deterministic(a, layer.n_clusters, mask)
    else:
        raise ValueError(f"unknown assignment mode {layer.assignment_mode!r}")
    x_next, a_next = pool(a, z, s, mask=mask)
    n_real = a.rows if mask is None else int(mask.sum())
    zero = Tensor(np.zeros((1, 1)))
    lp = link_prediction_loss(a, s, n=n_real) if layer.use_link_pred else zero
    ent = entropy_regularizer(s, mask=mask) if layer.use_entropy else zero
    return DiffPoolOutput(coarse_adjacency=a_next, coarse_features=x_next, assignment=s,
                          link_pred_loss=lp, entropy_loss=ent, embeddings=z)


def _masked_deterministic(a: Tensor, m: int, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None:
        return deterministic_assignment(a, m)
    real = np.flatnonzero(mask[:, 0] > 0)
    sub = deterministic_assignment(a.data[np.ix_(real, real)], m).data
    s = np.zeros((a.rows, m))
    s[real] = sub
    return Tensor(s)
