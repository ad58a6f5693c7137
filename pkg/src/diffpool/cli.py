"""Command-line entry point.

Commands: ``synth``, ``train``, ``eval``, ``export-assignments``, ``gradcheck``.
Results go to stdout as ``key=value`` lines; diagnostics go to stderr.

Exit codes:
    0  success
    1  unexpected failure
    2  usage or configuration error (unknown config key, invalid value)
    3  dataset or checkpoint ingestion failure
    4  graph index out of range
    5  gradient check failure

Configuration is resolved in increasing priority: built-in defaults, dataset
facts (``num_classes``, ``max_nodes``), the ``--config`` file, ``DIFFPOOL_<KEY>``
environment variables, then command-line flags.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .export import export_assignments, to_dot, to_json
from .graphs import (
    AugmentationError, Dataset, FormatError, IngestionError, StratificationError,
    augment_dataset, dataset_fingerprint, parse_tu_dataset, stratified_kfold, write_tu_dataset,
)
from .model import ConfigError, ModelConfig
from .synth import planted_hierarchy_dataset
from .training import (
    FoldResult, TrainConfig, evaluate, fold_seeds, run_fold, summarize_accuracies,
)

__all__ = ["main", "load_config_file", "resolve_configs", "ConfigKeyError", "ENV_PREFIX"]

ENV_PREFIX = "DIFFPOOL_"

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_INGEST, EXIT_INDEX, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5


class ConfigKeyError(KeyError):
    """A configuration key that names no ModelConfig or TrainConfig field."""

    def __str__(self) -> str:
        return f"unknown config key {self.args[0]!r}"


class ConfigValueError(ValueError):
    pass


def _field_types() -> dict[str, tuple[str, str]]:
    """Config key -> (owner, type name)."""
    out = {}
    for owner, cls in (("model", ModelConfig), ("train", TrainConfig)):
        for f in fields(cls):
            out[f.name] = (owner, f.type if isinstance(f.type, str) else f.type.__name__)
    return out


def _convert(key: str, raw: str, type_name: str):
    raw = raw.strip()
    try:
        if type_name == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError:
        raise ConfigValueError(f"config key {key!r}: cannot read {raw!r} as {type_name}") from None
    return raw


def load_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys are validated later."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValueError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_configs(file_values: Optional[dict[str, str]] = None,
                    env: Optional[dict[str, str]] = None,
                    overrides: Optional[dict] = None,
                    dataset: Optional[Dataset] = None) -> tuple[ModelConfig, TrainConfig]:
    types = _field_types()
    values: dict[str, object] = {}
    if dataset is not None:
        values["num_classes"] = dataset.num_classes
        values["max_nodes"] = dataset.max_nodes
    for key, raw in (file_values or {}).items():
        if key not in types:
            raise ConfigKeyError(key)
        values[key] = _convert(key, raw, types[key][1])
    for name, raw in (env if env is not None else os.environ).items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key in types:  # other DIFFPOOL_* variables are not config
            values[key] = _convert(key, raw, types[key][1])
    for key, value in (overrides or {}).items():
        if key not in types:
            raise ConfigKeyError(key)
        values[key] = value
    model_kw = {k: v for k, v in values.items() if types[k][0] == "model"}
    train_kw = {k: v for k, v in values.items() if types[k][0] == "train"}
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigValueError(str(exc)) from exc


def _write_records(path: Path, records: dict) -> None:
    lines = []
    for k, v in records.items():
        lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    path.write_text("\n".join(lines) + "\n")


def read_records(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _load_dataset(path: str) -> Dataset:
    return augment_dataset(parse_tu_dataset(path))


def _fold_job(args) -> FoldResult:
    """Train one fold; all writes stay inside this fold's files."""
    dataset, model_config, train_config, split, fold, seed, out_dir = args
    out = Path(out_dir)
    with open(out / f"metrics_fold{fold}.log", "w") as fh:
        def log(line: str) -> None:
            fh.write(line + "\n")

        result, model = run_fold(dataset, model_config, train_config, split, fold, seed, log)
    save_checkpoint(str(out / f"checkpoint_fold{fold}.npz"), model, extra={
        "fold": fold, "seed": seed, "test_indices": [int(i) for i in split.test],
        "dataset_fingerprint": dataset_fingerprint(dataset),
    })
    return result


def _flag_overrides(args) -> dict:
    over: dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "folds", None) is not None:
        over["folds"] = args.folds
    if getattr(args, "no_link_pred", False):
        over["use_link_pred"] = False
    if getattr(args, "no_entropy", False):
        over["use_entropy"] = False
    if getattr(args, "det_pool", False):
        over["assignment_mode"] = "deterministic"
    if getattr(args, "flat_baseline", False):
        over["num_diffpool_layers"] = 0
    return over


def cmd_train(args) -> int:
    dataset = _load_dataset(args.dataset)
    file_values = load_config_file(args.config) if args.config else {}
    model_config, train_config = resolve_configs(file_values, overrides=_flag_overrides(args),
                                                 dataset=dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    splits = stratified_kfold(dataset.labels, train_config.folds, train_config.seed,
                              train_config.validation_fraction)
    seeds = fold_seeds(train_config.seed, train_config.folds)
    jobs = [(dataset, model_config, train_config, s, f, seeds[f], str(out))
            for f, s in enumerate(splits)]
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    workers = max(1, min(workers, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(job) for job in jobs]

    # single-threaded merge
    mean, std = summarize_accuracies([r.test_accuracy for r in results])
    summary: dict[str, object] = {"mean_accuracy": mean, "std_accuracy": std,
                                  "folds": len(results)}
    for r in results:
        summary[f"fold{r.fold_index}_test_accuracy"] = r.test_accuracy
        summary[f"fold{r.fold_index}_train_accuracy"] = r.train_accuracy
        summary[f"fold{r.fold_index}_best_epoch"] = r.best_epoch
        summary[f"fold{r.fold_index}_epochs_run"] = r.epochs_run
    _write_records(out / "summary.txt", summary)

    manifest: dict[str, object] = {"version": __version__, "dataset": str(args.dataset),
                                   "dataset_name": dataset.name,
                                   "dataset_fingerprint": dataset_fingerprint(dataset)}
    manifest.update({f"model.{k}": v for k, v in asdict(model_config).items()})
    manifest.update({f"train.{k}": v for k, v in asdict(train_config).items()})
    manifest["workers"] = workers
    manifest["summary"] = str(out / "summary.txt")
    for r in results:
        manifest[f"metrics_fold{r.fold_index}"] = str(out / f"metrics_fold{r.fold_index}.log")
        manifest[f"checkpoint_fold{r.fold_index}"] = str(out / f"checkpoint_fold{r.fold_index}.npz")
    manifest["started"] = started
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    _write_records(out / "manifest.txt", manifest)

    print(f"mean_accuracy={mean!r}")
    print(f"std_accuracy={std!r}")
    print(f"summary={out / 'summary.txt'}")
    return EXIT_OK


def _parse_indices(text: Optional[str], default: Sequence[int]) -> list[int]:
    if not text:
        return list(default)
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigValueError(f"graph indices must be comma-separated integers: {text!r}") from None


def _checked_indices(indices: Sequence[int], dataset: Dataset) -> list[int]:
    for i in indices:
        if not 0 <= i < len(dataset):
            raise IndexError(f"graph index {i} out of range for {len(dataset)} graphs")
    return list(indices)


def _load_model_for(checkpoint: str, dataset: Dataset):
    model, extra = load_checkpoint(checkpoint)
    if model.feature_dim != dataset.feature_dim:
        raise ConfigValueError(f"checkpoint expects {model.feature_dim} feature columns, "
                               f"dataset has {dataset.feature_dim}")
    return model, extra


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.dataset)
    model, extra = _load_model_for(args.checkpoint, dataset)
    default = extra.get("test_indices", range(len(dataset)))
    indices = _checked_indices(_parse_indices(args.indices, default), dataset)
    loss, acc = evaluate(model, dataset, indices)
    print(f"graphs={len(indices)}")
    print(f"accuracy={acc!r}")
    print(f"mean_loss={loss!r}")
    return EXIT_OK


def cmd_export(args) -> int:
    dataset = _load_dataset(args.dataset)
    model, _ = _load_model_for(args.checkpoint, dataset)
    indices = _checked_indices(_parse_indices(args.indices, range(len(dataset))), dataset)
    export = export_assignments(model, dataset, indices, include_soft=args.soft)
    text = to_json(export) if args.format == "json" else to_dot(export, dataset)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    for rec in export.graphs:
        counts = ",".join(str(lv.effective_clusters) for lv in rec.levels)
        print(f"graph={rec.index} effective_clusters={counts}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import failing, format_report, run_all

    results = run_all(args.seed)
    print(format_report(results))
    bad = failing(results)
    if bad:
        print("gradient check failed: " + ", ".join(bad), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = planted_hierarchy_dataset(args.num_graphs, args.seed)
    out = Path(args.out)
    write_tu_dataset(ds, out, name=out.name)
    print(f"dataset={out}")
    print(f"graphs={len(ds)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffpool",
                                     description="Hierarchical graph classification "
                                                 "with differentiable pooling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="cross-validated training on a TU dataset")
    p.add_argument("--dataset", required=True, help="TU dataset directory")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--no-link-pred", action="store_true", help="DiffPool-NoLP variant")
    p.add_argument("--no-entropy", action="store_true")
    p.add_argument("--det-pool", action="store_true", help="DiffPool-Det variant")
    p.add_argument("--flat-baseline", action="store_true",
                   help="no pooling levels: GNN plus global mean pooling")
    p.add_argument("--workers", type=int, help="parallel folds (default: CPU count)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--indices", help="comma-separated graph indices "
                                     "(default: the checkpoint's test fold)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-assignments", help="write per-level cluster memberships")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--indices", help="comma-separated graph indices (default: all)")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "dot"), default="json")
    p.add_argument("--soft", action="store_true", help="include soft assignment matrices")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate the planted-hierarchy benchmark")
    p.add_argument("--kind", choices=("planted-hierarchy",), default="planted-hierarchy")
    p.add_argument("--num-graphs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigKeyError, ConfigValueError, ConfigError, StratificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, FormatError, CheckpointError, AugmentationError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except IndexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INDEX


if __name__ == "__main__":
    sys.exit(main())
