"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs requires a gradient. Outside a
tape every operation is a plain NumPy evaluation, which is what evaluation
loops use.

    >>> w = Parameter("w", np.array([[1.0, 2.0]]))
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(w, w))
    ...     backward(loss, tape)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "RunningStats",
    "ShapeError", "TapeError", "ContractError",
    "tensor", "constant", "backward",
    "matmul", "add", "subtract", "scale", "mul", "transpose", "hconcat",
    "row_mean", "sum_all", "relu", "row_softmax", "frobenius_diff_norm",
    "row_entropy_mean", "row_l2_normalize", "batch_norm", "cross_entropy_from_logits",
    "log_softmax_rows",
]

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """A tensor is used with a tape it was not recorded on."""


class ContractError(ValueError):
    """An input violates an operation's documented precondition."""


class Tensor:
    """A 2-D float64 array plus an optional gradient slot.

    ``node`` is ``(tape, generation, index)`` for recorded intermediates and
    ``None`` for leaves and constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {data.shape}")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[tuple] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def node_id(self) -> Optional[int]:
        return None if self.node is None else self.node[2]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"


class Parameter(Tensor):
    """Trainable leaf tensor carrying its own Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, name: str, data: np.ndarray):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    arr = np.array(values, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Tensor(arr, requires_grad=requires_grad)


def constant(values) -> Tensor:
    return tensor(values, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so parents always precede their
    children. ``clear()`` bumps the generation, invalidating every node id
    minted before it.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.generation = 0

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: BackwardFn) -> None:
        out.node = (self, self.generation, len(self._nodes))
        self._nodes.append((out, parents, fn))

    def owns(self, t: Tensor) -> bool:
        return t.node is not None and t.node[0] is self and t.node[1] == self.generation

    def clear(self) -> None:
        self._nodes.clear()
        self.generation += 1


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    tape = Tape.active()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.record(out, parents, fn)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None,
             params: Optional[Sequence[Tensor]] = None) -> None:
    """Assign d(loss)/d(leaf) to ``.grad`` of every leaf reached from ``loss``.

    Leaf gradients are overwritten, not accumulated across calls. Leaves in
    ``params`` that the loss does not depend on receive zeros.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    if tape is None:
        tape = loss.node[0] if loss.node is not None else Tape.active()
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    if not tape.owns(loss):
        raise TapeError("loss was not recorded on the given tape")

    nodes = tape._nodes
    gen = tape.generation
    last = loss.node[2]
    grads: list[Optional[np.ndarray]] = [None] * (last + 1)
    grads[last] = np.ones((1, 1), dtype=DTYPE)
    seen_leaves: set[int] = set()

    for idx in range(last, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        _, parents, fn = nodes[idx]
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pnode = parent.node
            if pnode is not None:
                if pnode[0] is not tape or pnode[1] != gen:
                    raise TapeError("operand recorded on a different tape")
                j = pnode[2]
                grads[j] = pg if grads[j] is None else grads[j] + pg
            else:
                key = id(parent)
                if key not in seen_leaves:
                    seen_leaves.add(key)
                    parent.grad = np.array(pg, dtype=DTYPE, copy=True)
                else:
                    parent.grad += pg


# ---------------------------------------------------------------------------
# elementary operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1xd row broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        def fn(g):
            return g, g
    elif b.rows == 1 and b.cols == a.cols:
        def fn(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), fn)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"subtract shape mismatch: {a.shape} - {b.shape}")

    def fn(g):
        return g, -g

    return _result(a.data - b.data, (a, b), fn)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def fn(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be an nx1 column broadcast over columns."""
    if a.shape == b.shape:
        def fn(g):
            return (g * b.data if a.requires_grad else None,
                    g * a.data if b.requires_grad else None)
    elif b.cols == 1 and b.rows == a.rows:
        def fn(g):
            return (g * b.data if a.requires_grad else None,
                    (g * a.data).sum(axis=1, keepdims=True) if b.requires_grad else None)
    else:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _result(a.data * b.data, (a, b), fn)


def transpose(a: Tensor) -> Tensor:
    def fn(g):
        return (g.T,)

    return _result(a.data.T, (a,), fn)


def hconcat(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("hconcat needs at least one tensor")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"hconcat row mismatch: {[q.shape for q in parts]}")
    edges = np.cumsum([0] + [p.cols for p in parts])

    def fn(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, fn)


def row_mean(a: Tensor) -> Tensor:
    """Mean over rows: (n x d) -> (1 x d)."""
    n = a.rows
    if n == 0:
        raise ShapeError("row_mean of an empty tensor")

    def fn(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _result(a.data.mean(axis=0, keepdims=True), (a,), fn)


def sum_all(a: Tensor) -> Tensor:
    def fn(g):
        return (np.full(a.shape, g[0, 0]),)

    return _result(np.array([[a.data.sum()]]), (a,), fn)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def fn(g):
        return (g * pos,)

    return _result(np.where(pos, x.data, 0.0), (x,), fn)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(x: Tensor) -> Tensor:
    s = _softmax(x.data)

    def fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), fn)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def frobenius_diff_norm(a: Tensor, b: Tensor) -> Tensor:
    """sqrt(sum((a - b)**2)); the gradient at a == b is defined as zero."""
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_diff_norm shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    norm = float(np.sqrt(np.sum(d * d)))

    def fn(g):
        if norm == 0.0:
            z = np.zeros_like(d)
            return z, z
        ga = d * (g[0, 0] / norm)
        return ga, -ga

    return _result(np.array([[norm]]), (a, b), fn)


def row_entropy_mean(s: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean natural-log entropy of the rows of ``s`` (0 ln 0 := 0).

    With ``mask`` (n x 1 of 0/1) only rows marked 1 are checked and averaged.
    """
    p = s.data
    rowsum = p.sum(axis=1)
    if mask is None:
        active = np.ones(p.shape[0], dtype=bool)
    else:
        active = mask[:, 0] > 0
    n = int(active.sum())
    if n == 0:
        raise ContractError("row_entropy_mean needs at least one active row")
    bad = active & (np.abs(rowsum - 1.0) > 1e-6)
    if bad.any():
        i = int(np.argmax(bad))
        raise ContractError(f"row {i} sums to {rowsum[i]!r}, expected a probability vector")
    if (p[active] < 0).any():
        raise ContractError("row_entropy_mean needs nonnegative entries")
    pos = (p > 0) & active[:, None]
    logp = np.log(np.where(pos, p, 1.0))
    value = -np.sum(p * logp * pos) / n

    def fn(g):
        return (np.where(pos, -(logp + 1.0), 0.0) * (g[0, 0] / n),)

    return _result(np.array([[value]]), (s,), fn)


def row_l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||_2, eps)."""
    xd = x.data
    norms = np.sqrt(np.sum(xd * xd, axis=1, keepdims=True))
    big = norms > eps
    denom = np.where(big, norms, eps)
    y = xd / denom

    def fn(g):
        proj = np.sum(y * g, axis=1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return _result(y, (x,), fn)


class RunningStats:
    """Batch-norm running mean/variance for one layer."""

    __slots__ = ("mean", "var", "momentum")

    def __init__(self, dim: int, momentum: float = 0.1):
        self.mean = np.zeros((1, dim), dtype=DTYPE)
        self.var = np.ones((1, dim), dtype=DTYPE)
        self.momentum = momentum


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
               mode: str = "train", eps: float = 1e-5,
               mask: Optional[np.ndarray] = None, update_stats: bool = True) -> Tensor:
    """Column-wise normalization over the rows of ``x``.

    ``train`` mode normalizes with the statistics of ``x`` itself and, unless
    ``update_stats`` is false, folds them into ``stats``; ``eval`` mode uses
    the running statistics. ``mask`` (n x 1 of 0/1) restricts the statistics
    to marked rows; masked-out rows come back as zeros.
    """
    n, d = x.shape
    if n == 0:
        raise ShapeError("batch_norm on an empty input")
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"batch_norm params must be 1x{d}, got {gamma.shape}, {beta.shape}")
    xd = x.data
    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (xd - stats.mean) * inv
        y = xhat * gamma.data + beta.data
        if mask is not None:
            y = y * mask
            xhat = xhat * mask

        def fn_eval(g):
            gm = g if mask is None else g * mask
            return (gm * gamma.data * inv,
                    np.sum(gm * xhat, axis=0, keepdims=True),
                    np.sum(gm, axis=0, keepdims=True))

        return _result(y, (x, gamma, beta), fn_eval)
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    if mask is None:
        m = n
        mean = xd.mean(axis=0, keepdims=True)
        cen = xd - mean
        var = np.mean(cen * cen, axis=0, keepdims=True)
    else:
        m = float(mask.sum())
        if m == 0:
            raise ShapeError("batch_norm mask selects no rows")
        mean = np.sum(xd * mask, axis=0, keepdims=True) / m
        cen = (xd - mean) * mask
        var = np.sum(cen * cen, axis=0, keepdims=True) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = cen * inv
    y = xhat * gamma.data + beta.data
    if mask is not None:
        y = y * mask

    if update_stats:
        mom = stats.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats.mean = (1 - mom) * stats.mean + mom * mean
        stats.var = (1 - mom) * stats.var + mom * unbiased

    def fn(g):
        gm = g if mask is None else g * mask
        dxhat = gm * gamma.data
        sum_dxhat = np.sum(dxhat, axis=0, keepdims=True)
        sum_dxhat_xhat = np.sum(dxhat * xhat, axis=0, keepdims=True)
        dx = (inv / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        if mask is not None:
            dx = dx * mask
        return (dx,
                np.sum(gm * xhat, axis=0, keepdims=True),
                np.sum(gm, axis=0, keepdims=True))

    return _result(y, (x, gamma, beta), fn)


def cross_entropy_from_logits(logits: Tensor, label: int) -> Tensor:
    if logits.rows != 1:
        raise ShapeError(f"cross entropy takes 1xc logits, got {logits.shape}")
    c = logits.cols
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    logp = log_softmax_rows(logits.data)

    def fn(g):
        grad = np.exp(logp)
        grad[0, label] -= 1.0
        return (grad * g[0, 0],)

    return _result(np.array([[-logp[0, label]]]), (logits,), fn)
