"""Finite-difference checks of every differentiable operation and the full model.

Each check wraps an operation's output in a fixed random linear functional
``u^T f(x) v`` so that one scalar exercises every output entry, then compares
the tape gradient against central differences. Operations are looked up on
their modules at call time, so a test can monkeypatch a broken backward rule
and watch the suite fail.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers as L
from . import pooling as P
from . import tensor as T
from .graphs import Graph, augment_features
from .tensor import Parameter, Tensor

__all__ = [
    "CheckResult", "numeric_gradient", "relative_error", "check_function",
    "operation_checks", "end_to_end_check", "run_all", "format_report",
    "OP_TOLERANCE", "MODEL_TOLERANCE", "STEP",
]

STEP = 1e-6
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-8) over all entries."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(diff / scale)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f()
        x[idx] = orig - step
        lo = f()
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad


def check_function(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   rng: np.random.Generator, tolerance: float = OP_TOLERANCE,
                   step: float = STEP) -> CheckResult:
    """Compare tape and finite-difference gradients of ``u^T fn(*inputs) v``."""
    leaves = [Parameter(f"{name}.{i}", np.array(x, dtype=np.float64))
              for i, x in enumerate(inputs)]
    probe = fn(*[Tensor(p.data) for p in leaves])
    u = rng.normal(size=(1, probe.rows))
    v = rng.normal(size=(probe.cols, 1))

    def scalar(out: Tensor) -> Tensor:
        return T.matmul(T.matmul(Tensor(u), out), Tensor(v))

    with T.Tape() as tape:
        loss = scalar(fn(*leaves))
        T.backward(loss, tape, leaves)
    analytic = [p.grad.copy() for p in leaves]

    def value() -> float:
        return scalar(fn(*[Tensor(p.data) for p in leaves])).item()

    worst = 0.0
    for p, g in zip(leaves, analytic):
        worst = max(worst, relative_error(g, numeric_gradient(value, p.data, step)))
    return CheckResult(name, worst, tolerance)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    x = rng.normal(size=shape)
    small = np.abs(x) < margin
    x[small] = np.sign(x[small] + 0.5) * (margin + 0.1)
    return x


def _random_graph(rng: np.random.Generator, n: int, p: float = 0.5) -> np.ndarray:
    upper = np.triu(rng.random((n, n)) < p, 1)
    a = (upper | upper.T).astype(np.float64)
    for i in range(n - 1):  # path keeps every node connected
        a[i, i + 1] = a[i + 1, i] = 1.0
    return a


def operation_checks(seed: int = 0) -> list[CheckResult]:
    """One check per differentiable operation, with random well-conditioned inputs."""
    rng = np.random.default_rng(seed)
    r = lambda *shape: rng.normal(size=shape)  # noqa: E731
    results: list[CheckResult] = []

    def run(name, fn, *inputs):
        results.append(check_function(name, fn, inputs, rng))

    run("matmul", lambda a, b: T.matmul(a, b), r(3, 4), r(4, 2))
    run("add", lambda a, b: T.add(a, b), r(3, 4), r(3, 4))
    run("add_row_broadcast", lambda a, b: T.add(a, b), r(3, 4), r(1, 4))
    run("subtract", lambda a, b: T.subtract(a, b), r(3, 4), r(3, 4))
    run("scale", lambda a: T.scale(a, -2.5), r(3, 4))
    run("mul", lambda a, b: T.mul(a, b), r(3, 4), r(3, 4))
    run("mul_column_broadcast", lambda a, b: T.mul(a, b), r(3, 4), r(3, 1))
    run("transpose", lambda a: T.transpose(a), r(3, 4))
    run("hconcat", lambda a, b: T.hconcat([a, b]), r(3, 2), r(3, 3))
    run("row_mean", lambda a: T.row_mean(a), r(5, 3))
    run("sum_all", lambda a: T.sum_all(a), r(3, 4))
    run("relu", lambda a: T.relu(a), _away_from_zero(rng, (2, 3)))
    run("row_softmax", lambda a: T.row_softmax(a), r(3, 4))
    run("frobenius_diff_norm", lambda a, b: T.frobenius_diff_norm(a, b), r(3, 3), r(3, 3))
    # simplex-constrained inputs are reached through a softmax, as in the model
    run("row_entropy_mean", lambda z: T.row_entropy_mean(T.row_softmax(z)), r(4, 3))
    x = r(2, 3)
    x[np.linalg.norm(x, axis=1) < 0.1] += 0.5
    run("row_l2_normalize", lambda a: T.row_l2_normalize(a), x)
    run("batch_norm", lambda x, g, b: T.batch_norm(x, g, b, T.RunningStats(3), mode="train"),
        r(6, 3), r(1, 3), r(1, 3))
    run("batch_norm_eval", lambda x, g, b: T.batch_norm(x, g, b, T.RunningStats(3), mode="eval"),
        r(6, 3), r(1, 3), r(1, 3))
    run("cross_entropy_from_logits", lambda z: T.cross_entropy_from_logits(z, 1), r(1, 4))

    a4 = _random_graph(rng, 4) * rng.uniform(0.5, 1.5, size=(4, 4))
    a4 = (a4 + a4.T) / 2
    run("gcn_operator", lambda a: L.gcn_operator(a), a4)
    run("mean_operator", lambda a: L.mean_operator(a), a4)

    def layer_fn(kind):
        def f(a, h, w, b):
            p = L.GnnLayerParams(weight=w, bias=b, gamma=Tensor(np.ones((1, 2))),
                                 beta=Tensor(np.zeros((1, 2))), stats=T.RunningStats(2))
            return getattr(L, kind)(a, h, p)
        return f

    for kind in ("gcn_layer", "graphsage_mean_layer"):
        # shift the bias so no pre-activation sits at the ReLU kink
        run(kind, layer_fn(kind), a4, r(4, 3), r(3, 2), r(1, 2) + 0.05)

    logits6 = r(6, 2)
    a6 = _random_graph(rng, 6)
    sm = T.row_softmax
    run("pool_features", lambda z, s: P.pool(Tensor(a6), z, sm(s))[0], r(6, 3), logits6)
    run("pool_adjacency", lambda a, s: P.pool(a, Tensor(np.zeros((6, 1))), sm(s))[1],
        a6, logits6)
    run("link_prediction_loss", lambda s: P.link_prediction_loss(Tensor(a6), sm(s)), logits6)
    return results


def _gradcheck_model(seed: int):
    from .model import ModelConfig, build_model

    config = ModelConfig(hidden_dim=4, gnn_layers_per_block=2, num_diffpool_layers=2,
                         cluster_ratio=0.5, num_classes=2, max_nodes=6)
    rng = np.random.default_rng(seed)
    a = _random_graph(rng, 6)
    g = augment_features(Graph(adjacency=a, features=np.zeros((6, 0)), label=1))
    return build_model(config, g.features.shape[1], seed=seed), g


def end_to_end_check(seed: int = 0, step: float = STEP) -> CheckResult:
    """Total-loss gradient of every parameter of a small two-level model on a 6-node graph."""
    from .model import forward, total_loss

    model, g = _gradcheck_model(seed)
    params = model.parameters()
    stats = model.named_stats()
    saved = {k: (s.mean.copy(), s.var.copy()) for k, s in stats.items()}

    def restore():
        for k, s in stats.items():
            s.mean, s.var = saved[k][0].copy(), saved[k][1].copy()

    with T.Tape() as tape:
        loss = total_loss(forward(model, g, training=True))
        T.backward(loss, tape, params)
    restore()
    analytic = np.concatenate([p.grad.ravel() for p in params])

    def value() -> float:
        out = total_loss(forward(model, g, training=True)).item()
        restore()
        return out

    numeric = np.concatenate([numeric_gradient(value, p.data, step).ravel() for p in params])
    return CheckResult("end_to_end_model", relative_error(analytic, numeric), MODEL_TOLERANCE)


def run_all(seed: int = 0) -> list[CheckResult]:
    return operation_checks(seed) + [end_to_end_check(seed)]


def format_report(results: Sequence[CheckResult], precision: int = 6) -> str:
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"op={r.name} max_rel_error={r.error:.{precision}e} "
                     f"tolerance={r.tolerance:g} status={status}")
    return "\n".join(lines)


def failing(results: Sequence[CheckResult]) -> list[str]:
    return [r.name for r in results if not r.passed]


def main_report(seed: int = 0, out: Optional[Callable[[str], None]] = print) -> bool:
    results = run_all(seed)
    if out is not None:
        out(format_report(results))
    return not failing(results)
