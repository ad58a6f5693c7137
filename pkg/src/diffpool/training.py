"""Adam, global-norm clipping, early-stopped per-graph training and cross-validation."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .graphs import Dataset, Split, stratified_kfold
from .model import HierarchicalModel, ModelConfig, build_model, forward, total_loss
from .tensor import Parameter

__all__ = [
    "TrainConfig", "FoldResult", "CVResult",
    "clip_global_norm", "adam_step", "train_fold", "cross_validate", "evaluate",
    "summarize_accuracies", "fold_seeds", "run_fold",
]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 3000
    clip_norm: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_window: int = 50
    patience: int = 100
    folds: int = 10
    seed: int = 0
    lp_weight: float = 1.0
    entropy_weight: float = 1.0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.max_epochs < 1 or self.early_stop_window < 1 or self.patience < 1:
            raise ValueError("max_epochs, early_stop_window and patience must be positive")

    @property
    def aux_weights(self) -> tuple[float, float]:
        return (self.lp_weight, self.entropy_weight)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class FoldResult:
    fold_index: int
    best_epoch: int
    test_accuracy: float
    train_accuracy: float
    validation_curve: list[float] = field(default_factory=list)
    train_curve: list[float] = field(default_factory=list)
    epochs_run: int = 0


@dataclass
class CVResult:
    mean_accuracy: float
    std_accuracy: float
    folds: list[FoldResult]


def clip_global_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients by max_norm / ||g|| when the global norm exceeds max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= factor
    return float(factor)


def adam_step(params: Sequence[Parameter], config: TrainConfig, step_count: int) -> None:
    """One bias-corrected Adam update using each parameter's ``grad``."""
    if step_count < 1:
        raise ValueError("step_count starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step_count
    c2 = 1.0 - b2 ** step_count
    lr, eps = config.learning_rate, config.adam_eps
    for p in params:
        g = p.grad
        if g is None:
            continue
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * (g * g)
        p.data -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)


def evaluate(model: HierarchicalModel, dataset: Dataset, indices: Sequence[int],
             aux_weights: tuple[float, float] = (0.0, 0.0)) -> tuple[float, float]:
    """Mean loss and accuracy over ``indices`` with batch norm in eval mode."""
    losses, correct = [], 0
    for i in indices:
        g = dataset.graphs[i]
        res = forward(model, g, training=False)
        losses.append(total_loss(res, aux_weights).item())
        correct += int(np.argmax(res.logits.data[0]) == g.label)
    n = max(len(indices), 1)
    return float(np.mean(losses)) if losses else 0.0, correct / n


def _format_record(record: dict) -> str:
    parts = []
    for k, v in record.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def train_fold(model: HierarchicalModel, split: Split, dataset: Dataset, config: TrainConfig,
               *, fold_index: int = 0, seed: Optional[int] = None,
               log: Optional[Callable[[str], None]] = None) -> FoldResult:
    """Train with one Adam step per graph, early-stopping on validation loss.

    Validation loss is the mean cross-entropy. Training stops once the moving
    average of validation loss over ``early_stop_window`` epochs has not
    improved for ``patience`` epochs. The parameters of the epoch with the
    lowest raw validation loss are restored before testing.
    """
    for name, part in (("train", split.train), ("validation", split.validation),
                       ("test", split.test)):
        if len(part) == 0:
            raise ValueError(f"empty {name} split")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = model.parameters()
    weights = config.aux_weights
    train_idx = np.asarray(split.train)

    best_val, best_epoch, best_state = np.inf, 0, model.state_dict()
    best_ma, since_ma = np.inf, 0
    val_curve: list[float] = []
    train_curve: list[float] = []
    step = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        losses, lps, ents = [], [], []
        for i in rng.permutation(train_idx):
            g = dataset.graphs[i]
            with T.Tape() as tape:
                res = forward(model, g, training=True)
                loss = total_loss(res, weights)
                T.backward(loss, tape, params)
            clip_global_norm(params, config.clip_norm)
            step += 1
            adam_step(params, config, step)
            losses.append(loss.item())
            lps.append(sum(lp.item() for lp, _ in res.aux_losses))
            ents.append(sum(e.item() for _, e in res.aux_losses))
        val_loss, _ = evaluate(model, dataset, split.validation)
        train_curve.append(float(np.mean(losses)))
        val_curve.append(val_loss)

        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, model.state_dict()
        window = val_curve[-config.early_stop_window:]
        ma = float(np.mean(window))
        if ma < best_ma:
            best_ma, since_ma = ma, 0
        else:
            since_ma += 1
        if log is not None:
            log(_format_record({"fold": fold_index, "epoch": epoch,
                                "train_loss": train_curve[-1], "val_loss": val_loss,
                                "lp_loss": float(np.mean(lps)), "ent_loss": float(np.mean(ents)),
                                "seconds": time.perf_counter() - started}))
        if since_ma >= config.patience:
            break

    model.load_state_dict(best_state)
    _, test_acc = evaluate(model, dataset, split.test)
    _, train_acc = evaluate(model, dataset, split.train)
    result = FoldResult(fold_index=fold_index, best_epoch=best_epoch, test_accuracy=test_acc,
                        train_accuracy=train_acc, validation_curve=val_curve,
                        train_curve=train_curve, epochs_run=epoch)
    if log is not None:
        log(_format_record({"fold": fold_index, "summary": 1, "best_epoch": best_epoch,
                            "epochs_run": epoch, "best_val_loss": float(best_val),
                            "train_accuracy": float(train_acc),
                            "test_accuracy": float(test_acc)}))
    return result


def summarize_accuracies(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    acc = np.asarray(accuracies, dtype=float)
    std = float(acc.std(ddof=1)) if acc.size > 1 else 0.0
    return float(acc.mean()), std


def fold_seeds(seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def run_fold(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
             split: Split, fold_index: int, seed: int,
             log: Optional[Callable[[str], None]] = None
             ) -> tuple[FoldResult, HierarchicalModel]:
    """Build a fresh model from ``seed`` and train it on one split."""
    model = build_model(copy.deepcopy(model_config), dataset.feature_dim, seed=seed)
    result = train_fold(model, split, dataset, train_config, fold_index=fold_index, seed=seed,
                        log=log)
    return result, model


def _run_fold(args) -> FoldResult:
    return run_fold(*args)[0]


def cross_validate(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                   *, log_factory: Optional[Callable[[int], Callable[[str], None]]] = None,
                   on_fold: Optional[Callable[[FoldResult, HierarchicalModel], None]] = None,
                   workers: int = 1) -> CVResult:
    """Stratified k-fold cross-validation with one fresh model per fold.

    ``on_fold`` receives each fold's result and trained model (e.g. to write a
    checkpoint). With ``workers > 1`` folds run in separate processes; results
    do not depend on the worker count.
    """
    splits = stratified_kfold(dataset.labels, train_config.folds, train_config.seed,
                              train_config.validation_fraction)
    seeds = fold_seeds(train_config.seed, train_config.folds)
    results: list[FoldResult] = []
    if workers > 1 and on_fold is None and log_factory is None:
        from concurrent.futures import ProcessPoolExecutor
        jobs = [(dataset, model_config, train_config, s, f, seeds[f])
                for f, s in enumerate(splits)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        for f, split in enumerate(splits):
            log = log_factory(f) if log_factory is not None else None
            res, model = run_fold(dataset, model_config, train_config, split, f, seeds[f], log)
            if on_fold is not None:
                on_fold(res, model)
            results.append(res)
    mean, std = summarize_accuracies([r.test_accuracy for r in results])
    return CVResult(mean_accuracy=mean, std_accuracy=std, folds=results)
