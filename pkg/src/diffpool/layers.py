"""Message-passing layers: GCN and GraphSAGE-mean propagation, GNN modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Parameter, RunningStats, Tensor, _result

__all__ = [
    "GnnLayerParams", "GnnModule", "DegeneracyError",
    "gcn_operator", "mean_operator", "propagation_operator",
    "gcn_layer", "graphsage_mean_layer", "gnn_forward", "make_gnn_module",
]

VARIANTS = ("gcn", "graphsage_mean")
BN_INFERENCE = ("graph", "running")


class DegeneracyError(ArithmeticError):
    """A propagation operator would divide by a non-positive degree."""


def _augmented(a: Tensor) -> tuple[np.ndarray, np.ndarray]:
    at = a.data + np.eye(a.rows)
    deg = at.sum(axis=1)
    if (deg <= 0).any():
        raise DegeneracyError(f"non-positive degree {deg.min()!r} in A + I")
    return at, deg


def gcn_operator(a: Tensor) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 with weighted degrees; differentiable in ``a``."""
    at, deg = _augmented(a)
    dinv = 1.0 / np.sqrt(deg)
    op = at * dinv[:, None] * dinv[None, :]

    def fn(g):
        gn = g * op
        coef = -(gn.sum(axis=1) + gn.sum(axis=0)) / (2.0 * deg)
        return (g * dinv[:, None] * dinv[None, :] + coef[:, None],)

    return _result(op, (a,), fn)


def mean_operator(a: Tensor) -> Tensor:
    """D^-1 (A + I): self-inclusive weighted neighbour mean; differentiable in ``a``."""
    at, deg = _augmented(a)
    op = at / deg[:, None]

    def fn(g):
        coef = -(g * op).sum(axis=1) / deg
        return (g / deg[:, None] + coef[:, None],)

    return _result(op, (a,), fn)


def propagation_operator(a: Tensor, variant: str) -> Tensor:
    if variant == "gcn":
        return gcn_operator(a)
    if variant == "graphsage_mean":
        return mean_operator(a)
    raise ValueError(f"unknown GNN variant {variant!r}")


@dataclass
class GnnLayerParams:
    weight: Parameter
    bias: Parameter
    gamma: Parameter
    beta: Parameter
    stats: RunningStats
    variant: str = "graphsage_mean"

    @property
    def d_in(self) -> int:
        return self.weight.rows

    @property
    def d_out(self) -> int:
        return self.weight.cols

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias, self.gamma, self.beta]


@dataclass
class GnnModule:
    """K stacked propagation layers, Z = GNN(A, X).

    With ``linear_output`` the last layer is affine only (no ReLU or
    normalization); pooling GNNs use it so their outputs can serve as logits.
    ``bn_inference`` picks the batch-norm statistics used outside training:
    ``"graph"`` normalizes each graph by its own node statistics (the same
    computation as training, without touching the running averages) and
    ``"running"`` uses the running averages.
    """

    layers: list[GnnLayerParams]
    use_bn: bool = True
    use_l2_norm: bool = True
    linear_output: bool = False
    name: str = "gnn"
    bn_inference: str = "graph"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a GNN module needs at least one layer")
        if self.bn_inference not in BN_INFERENCE:
            raise ValueError(f"unknown bn_inference {self.bn_inference!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise T.ShapeError(f"layer widths do not chain: {prev.d_out} -> {nxt.d_in}")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    @property
    def variant(self) -> str:
        return self.layers[0].variant

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def running_stats(self) -> list[RunningStats]:
        return [layer.stats for layer in self.layers]


def make_gnn_module(widths: list[int], rng: np.random.Generator, variant: str = "graphsage_mean",
                    use_bn: bool = True, use_l2_norm: bool = True, linear_output: bool = False,
                    name: str = "gnn", bn_inference: str = "graph") -> GnnModule:
    """Build a module with layer widths ``widths[0] -> widths[1] -> ...``.

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at
    zero, batch-norm scale at one.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown GNN variant {variant!r}")
    layers = []
    for k, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        bound = 1.0 / np.sqrt(max(d_in, 1))
        prefix = f"{name}.{k}"
        layers.append(GnnLayerParams(
            weight=Parameter(f"{prefix}.weight", rng.uniform(-bound, bound, size=(d_in, d_out))),
            bias=Parameter(f"{prefix}.bias", np.zeros((1, d_out))),
            gamma=Parameter(f"{prefix}.bn_gamma", np.ones((1, d_out))),
            beta=Parameter(f"{prefix}.bn_beta", np.zeros((1, d_out))),
            stats=RunningStats(d_out),
            variant=variant,
        ))
    return GnnModule(layers=layers, use_bn=use_bn, use_l2_norm=use_l2_norm,
                     linear_output=linear_output, name=name, bn_inference=bn_inference)


def _affine(op: Tensor, h: Tensor, p: GnnLayerParams) -> Tensor:
    if h.cols != p.d_in:
        raise T.ShapeError(f"layer expects {p.d_in} input columns, got {h.cols}")
    if p.d_out <= p.d_in:
        hw = T.matmul(op, T.matmul(h, p.weight))
    else:
        hw = T.matmul(T.matmul(op, h), p.weight)
    return T.add(hw, p.bias)


def gcn_layer(a: Tensor, h: Tensor, p: GnnLayerParams) -> Tensor:
    """ReLU(D^-1/2 (A+I) D^-1/2 H W + b)."""
    return T.relu(_affine(gcn_operator(a), h, p))


def graphsage_mean_layer(a: Tensor, h: Tensor, p: GnnLayerParams) -> Tensor:
    """ReLU(D^-1 (A+I) H W + b)."""
    return T.relu(_affine(mean_operator(a), h, p))


def gnn_forward(m: GnnModule, a: Tensor, x: Tensor, *, training: bool = True,
                mask: Optional[np.ndarray] = None, operator: Optional[Tensor] = None) -> Tensor:
    """Run all K layers of ``m``; batch norm then row l2-normalization after each.

    ``operator`` lets callers share one propagation operator between the
    embedding and pooling GNNs of a level. ``mask`` (n x 1) zeroes padded rows
    and keeps them out of batch-norm statistics.
    """
    if a.rows != x.rows:
        raise T.ShapeError(f"adjacency {a.shape} and features {x.shape} disagree on n")
    op = operator if operator is not None else propagation_operator(a, m.variant)
    mode = "train" if (training or m.bn_inference == "graph") else "eval"
    mask_t = None if mask is None else Tensor(mask)
    h = x
    last = len(m.layers) - 1
    for k, layer in enumerate(m.layers):
        h = _affine(op, h, layer)
        if m.linear_output and k == last:
            break
        h = T.relu(h)
        if mask_t is not None:
            h = T.mul(h, mask_t)
        if m.use_bn:
            h = T.batch_norm(h, layer.gamma, layer.beta, layer.stats, mode=mode, mask=mask,
                             update_stats=training)
        if m.use_l2_norm:
            h = T.row_l2_normalize(h)
    if mask_t is not None:
        h = T.mul(h, mask_t)
    return h
