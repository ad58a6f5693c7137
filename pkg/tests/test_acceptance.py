"""Acceptance criteria, each run at its stated tolerance and budget.

Every test records one pass/fail line that is printed in the pytest terminal
summary under "acceptance criteria". Criteria 8 and 9 need the public TU
benchmark files: point ``TU_DATA_DIR`` at a directory holding ``ENZYMES/`` and
``PROTEINS/``. Criterion 8 additionally needs ``RUN_ENZYMES=1``.
"""

from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from diffpool import tensor as T
from diffpool.cli import main, read_records
from diffpool.graphs import (
    Graph, Split, augment_dataset, augment_features, dataset_statistics, parse_tu_dataset,
)
from diffpool.model import ModelConfig, build_model, permutation_invariance_check
from diffpool.pooling import entropy_regularizer, link_prediction_loss, pool
from diffpool.synth import planted_hierarchy_dataset
from diffpool.training import TrainConfig, train_fold

from conftest import record_criterion, two_triangles

TU_DATA_DIR = os.environ.get("TU_DATA_DIR")
RUN_ENZYMES = os.environ.get("RUN_ENZYMES") == "1"

BENCHMARK_CONFIG = """\
hidden_dim = 32
learning_rate = 0.001
max_epochs = 300
early_stop_window = 10
patience = 30
"""

ABLATION_CONFIG = """\
hidden_dim = 16
learning_rate = 0.001
max_epochs = 60
early_stop_window = 10
patience = 15
"""

ABLATION_SEEDS = (0, 1, 2, 3, 4)


def check(number: int, passed: bool, detail: str) -> None:
    record_criterion(number, "PASS" if passed else "FAIL", detail)
    assert passed, f"criterion {number}: {detail}"


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    root = tmp_path_factory.mktemp("planted")
    data = root / "PLANTED"
    assert main(["synth", "--num-graphs", "200", "--seed", "0", "--out", str(data)]) == 0
    (root / "benchmark.txt").write_text(BENCHMARK_CONFIG)
    (root / "ablation.txt").write_text(ABLATION_CONFIG)
    return root


def train_cli(planted: Path, config: str, out: Path, *flags: str) -> dict[str, str]:
    code = main(["train", "--dataset", str(planted / "PLANTED"), "--config", str(planted / config),
                 "--out", str(out), "--folds", "5", "--workers", "1", *flags])
    assert code == 0
    return read_records(out / "summary.txt")


def test_criterion_01_gradient_oracle(capsys):
    started = time.perf_counter()
    code = main(["gradcheck", "--seed", "0"])
    elapsed = time.perf_counter() - started
    report = capsys.readouterr().out.splitlines()
    worst_op = max(float(line.split()[1].split("=")[1]) for line in report
                   if not line.startswith("op=end_to_end_model "))
    e2e = next(float(line.split()[1].split("=")[1]) for line in report
               if line.startswith("op=end_to_end_model "))
    check(1, code == 0 and worst_op < 1e-4 and e2e < 1e-3 and elapsed < 60,
          f"worst op rel err {worst_op:.2e} (<1e-4), end-to-end {e2e:.2e} (<1e-3), "
          f"{elapsed:.1f}s (<60s)")


def test_criterion_02_permutation_invariance():
    started = time.perf_counter()
    rng = np.random.default_rng(2)
    config = ModelConfig(hidden_dim=16, num_diffpool_layers=2, cluster_ratio=0.25, max_nodes=12,
                         num_classes=2)
    worst = 0.0
    for i in range(10):
        upper = np.triu(rng.random((12, 12)) < 0.3, 1)
        a = (upper | upper.T).astype(float)
        g = augment_features(Graph(adjacency=a, features=np.zeros((12, 0)), label=i % 2))
        model = build_model(config, g.features.shape[1], seed=i)
        worst = max(worst, permutation_invariance_check(model, g, trials=20, seed=i))
    elapsed = time.perf_counter() - started
    check(2, worst < 1e-6 and elapsed < 60,
          f"max logit deviation {worst:.2e} (<1e-6) over 10 graphs x 20 permutations, "
          f"{elapsed:.1f}s (<60s)")


def test_criterion_03_pooling_oracles():
    rng = np.random.default_rng(3)
    a = rng.random((7, 7))
    a = np.triu(a < 0.5, 1).astype(float)
    a = a + a.T
    z = rng.normal(size=(7, 4))
    xp, ap = pool(T.tensor(a), T.tensor(z), T.tensor(np.eye(7)))
    identity_ok = np.array_equal(xp.data, z) and np.array_equal(ap.data, a)

    hard = np.array([[1, 0]] * 3 + [[0, 1]] * 3, dtype=float)
    tt = two_triangles()
    _, ap = pool(T.tensor(tt), T.tensor(np.ones((6, 1))), T.tensor(hard))
    blocks_ok = ap.data.tolist() == [[6.0, 1.0], [1.0, 6.0]]
    lp_err = abs(link_prediction_loss(T.tensor(tt), T.tensor(hard)).item() - math.sqrt(8) / 36)

    worst_mass = 0.0
    for _ in range(100):
        n, m = int(rng.integers(2, 15)), int(rng.integers(1, 6))
        w = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.5), 1)
        w = w + w.T
        logits = rng.normal(size=(n, m)) * 2
        s = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        _, ap = pool(T.tensor(w), T.tensor(np.ones((n, 1))), T.tensor(s))
        worst_mass = max(worst_mass, abs(ap.data.sum() - w.sum()))
    check(3, identity_ok and blocks_ok and lp_err <= 1e-12 and worst_mass <= 1e-9,
          f"identity exact={identity_ok}, A'=[[6,1],[1,6]] exact={blocks_ok}, "
          f"|L_LP - sqrt(8)/36|={lp_err:.1e} (<=1e-12), max mass drift {worst_mass:.1e} (<=1e-9)")


def test_criterion_04_loss_extremes():
    one_hot = np.eye(5)[[0, 3, 3, 1, 4, 2]]
    ent_hot = entropy_regularizer(T.tensor(one_hot)).item() + 0.0  # drop the sign of -0.0
    worst_uniform = max(abs(entropy_regularizer(T.tensor(np.full((6, m), 1.0 / m))).item()
                            - math.log(m)) for m in range(2, 9))
    s = np.array([[1, 0], [1, 0], [0, 1]], dtype=float)
    lp_exact = link_prediction_loss(T.tensor(s @ s.T), T.tensor(s)).item()
    check(4, ent_hot == 0.0 and worst_uniform <= 1e-12 and lp_exact == 0.0,
          f"L_E(one-hot)={ent_hot}, max |L_E(uniform) - ln m|={worst_uniform:.1e} (<=1e-12), "
          f"L_LP(SS^T=A)={lp_exact}")


def memorize(seed: int = 0):
    ds = augment_dataset(planted_hierarchy_dataset(20, seed))
    everything = np.arange(20)
    model = build_model(ModelConfig(hidden_dim=32, max_nodes=60, num_classes=2), ds.feature_dim,
                        seed=1)
    config = TrainConfig(max_epochs=2000, early_stop_window=10, patience=50)
    return train_fold(model, Split(everything, everything, everything), ds, config, seed=1)


def summary_text(result) -> str:
    return (f"train_accuracy={result.train_accuracy!r}\nbest_epoch={result.best_epoch}\n"
            f"epochs_run={result.epochs_run}\n"
            f"validation_curve={','.join(repr(v) for v in result.validation_curve)}\n")


@pytest.fixture(scope="module")
def memorization(tmp_path_factory):
    started = time.perf_counter()
    result = memorize()
    elapsed = time.perf_counter() - started
    path = tmp_path_factory.mktemp("memorize") / "summary.txt"
    path.write_text(summary_text(result))
    return result, elapsed, path


@pytest.mark.slow
def test_criterion_05_memorization(memorization):
    result, elapsed, _ = memorization
    check(5, result.train_accuracy >= 0.99 and result.epochs_run <= 2000 and elapsed < 300,
          f"train accuracy {result.train_accuracy:.3f} (>=0.99) after {result.epochs_run} epochs "
          f"(<=2000), {elapsed:.0f}s (<300s)")


@pytest.fixture(scope="module")
def benchmark(planted):
    started = time.perf_counter()
    diffpool = train_cli(planted, "benchmark.txt", planted / "diffpool")
    flat = train_cli(planted, "benchmark.txt", planted / "flat", "--flat-baseline")
    return diffpool, flat, time.perf_counter() - started


@pytest.mark.slow
def test_criterion_06_hierarchical_signal(benchmark):
    diffpool, flat, elapsed = benchmark
    dp_acc, flat_acc = float(diffpool["mean_accuracy"]), float(flat["mean_accuracy"])
    gap = 100 * (dp_acc - flat_acc)
    epochs = max(int(v) for summary in (diffpool, flat) for k, v in summary.items()
                 if k.endswith("_epochs_run"))
    check(6, dp_acc >= 0.85 and gap >= 10 and epochs <= 300 and elapsed < 900,
          f"DiffPool {100 * dp_acc:.1f}% (>=85%), flat {100 * flat_acc:.1f}%, gap {gap:+.1f} pts "
          f"(>=+10), max epochs {epochs} (<=300), {elapsed:.0f}s (<900s)")


@pytest.fixture(scope="module")
def ablation(planted):
    with_lp, without_lp = [], []
    for seed in ABLATION_SEEDS:
        base = planted / f"ablation_seed{seed}"
        with_lp.append(float(train_cli(planted, "ablation.txt", base / "lp", "--seed",
                                       str(seed))["mean_accuracy"]))
        without_lp.append(float(train_cli(planted, "ablation.txt", base / "nolp", "--seed",
                                          str(seed), "--no-link-pred")["mean_accuracy"]))
    return np.array(with_lp), np.array(without_lp)


@pytest.mark.slow
def test_criterion_07_link_prediction_ablation(ablation):
    with_lp, without_lp = ablation
    mean_lp, mean_nolp = 100 * with_lp.mean(), 100 * without_lp.mean()
    std_lp, std_nolp = 100 * with_lp.std(ddof=1), 100 * without_lp.std(ddof=1)
    stability = "holds" if std_lp <= std_nolp else "does not hold (reported only)"
    check(7, mean_lp >= mean_nolp - 2,
          f"with L_LP {mean_lp:.1f}% +- {std_lp:.1f}, without {mean_nolp:.1f}% +- {std_nolp:.1f} "
          f"over {len(ABLATION_SEEDS)} seeds (need with >= without - 2); "
          f"std ordering {stability}")


def skip_criterion(number: int, reason: str) -> None:
    record_criterion(number, "SKIP", reason)
    pytest.skip(reason)


@pytest.mark.slow
def test_criterion_08_enzymes(tmp_path):
    if not (TU_DATA_DIR and RUN_ENZYMES):
        skip_criterion(8, "set TU_DATA_DIR and RUN_ENZYMES=1 to run the ENZYMES benchmark")
    root = Path(TU_DATA_DIR)
    cfg = tmp_path / "enzymes.txt"
    cfg.write_text("hidden_dim = 64\nnum_diffpool_layers = 1\ncluster_ratio = 0.1\n"
                   "max_epochs = 300\n")
    started = time.perf_counter()
    assert main(["train", "--dataset", str(root / "ENZYMES"), "--config", str(cfg),
                 "--out", str(tmp_path / "run"), "--folds", "10"]) == 0
    elapsed = time.perf_counter() - started
    acc = float(read_records(tmp_path / "run" / "summary.txt")["mean_accuracy"])
    check(8, acc >= 0.35 and elapsed < 7200,
          f"ENZYMES 10-fold accuracy {100 * acc:.1f}% (>=35%), {elapsed:.0f}s (<7200s)")


@pytest.mark.parametrize("name, graphs, classes, mean_nodes",
                         [("ENZYMES", 600, 6, 32.63), ("PROTEINS", 1113, 2, 39.06)])
def test_criterion_09_dataset_statistics(name, graphs, classes, mean_nodes):
    if not TU_DATA_DIR:
        skip_criterion(9, "set TU_DATA_DIR to a directory holding ENZYMES/ and PROTEINS/")
    stats = dataset_statistics(parse_tu_dataset(Path(TU_DATA_DIR) / name))
    ok = (stats["graphs"] == graphs and stats["classes"] == classes
          and round(stats["mean_nodes"], 2) == mean_nodes)
    record_criterion(9, "PASS" if ok else "FAIL",
                     f"{name}: {stats['graphs']} graphs, {stats['classes']} classes, "
                     f"{stats['mean_nodes']:.2f} mean nodes (want {graphs}/{classes}/{mean_nodes})")
    assert ok


@pytest.mark.slow
def test_criterion_10_determinism(memorization, planted, tmp_path):
    _, _, first_memo = memorization
    second_memo = tmp_path / "memorize_summary.txt"
    second_memo.write_text(summary_text(memorize()))
    same = {"memorization": first_memo.read_bytes() == second_memo.read_bytes()}

    # the benchmark and ablation configurations, rerun twice on a short epoch budget
    short = tmp_path / "short"
    short.mkdir()
    for config in ("benchmark.txt", "ablation.txt"):
        text = (planted / config).read_text().replace("max_epochs = 300", "max_epochs = 5")
        (short / config).write_text(text.replace("max_epochs = 60", "max_epochs = 5"))
    (short / "PLANTED").symlink_to(planted / "PLANTED")
    for label, config, flags in (("benchmark", "benchmark.txt", ()),
                                 ("flat", "benchmark.txt", ("--flat-baseline",)),
                                 ("ablation_nolp", "ablation.txt", ("--seed", "3",
                                                                    "--no-link-pred"))):
        runs = [(tmp_path / f"{label}_{i}") for i in range(2)]
        for out in runs:
            train_cli(short, config, out, *flags)
        same[label] = ((runs[0] / "summary.txt").read_bytes()
                       == (runs[1] / "summary.txt").read_bytes())
    check(10, all(same.values()),
          "identical summaries on rerun: " + ", ".join(f"{k}={v}" for k, v in same.items()))
