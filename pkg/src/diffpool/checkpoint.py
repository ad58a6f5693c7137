"""Model checkpoints as versioned ``.npz`` archives.

Layout (format version 1):

``__format__``
    int64 scalar array holding :data:`FORMAT_VERSION`.
``__meta__``
    UTF-8 JSON (stored as a uint8 array) with keys ``model_config`` (every
    ModelConfig field), ``feature_dim`` and ``extra`` (free-form metadata).
every other key
    a float64 array named after a parameter (``level0.embed.1.weight``,
    ``mlp.0.bias``) or a batch-norm statistic
    (``level0.embed.1.running_mean``). Parameters of pooling GNNs unused in
    deterministic mode are still stored so modes can be swapped.

Archives are written uncompressed and without pickled objects, so
``np.load(..., allow_pickle=False)`` reads them.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from typing import Optional

import numpy as np

from .model import HierarchicalModel, ModelConfig, build_model

__all__ = ["FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, model: HierarchicalModel, extra: Optional[dict] = None) -> None:
    meta = {"model_config": asdict(model.config), "feature_dim": model.feature_dim,
            "extra": extra or {}}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    arrays = dict(sorted(model.state_dict().items()))
    for reserved in ("__format__", "__meta__"):
        if reserved in arrays:
            raise CheckpointError(f"parameter name {reserved!r} is reserved")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(FORMAT_VERSION, dtype=np.int64), __meta__=blob,
                 **arrays)


def load_checkpoint(path: str) -> tuple[HierarchicalModel, dict]:
    """Rebuild the model stored at ``path``; returns (model, extra metadata)."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    with archive:
        if "__format__" not in archive.files or "__meta__" not in archive.files:
            raise CheckpointError(f"{path}: missing format header")
        version = int(archive["__format__"])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        state = {k: archive[k] for k in archive.files if not k.startswith("__")}
    config = ModelConfig(**meta["model_config"])
    model = build_model(config, int(meta["feature_dim"]), seed=0)
    try:
        model.load_state_dict(state)
    except KeyError as exc:
        raise CheckpointError(f"{path}: {exc.args[0]}") from exc
    return model, meta.get("extra", {})
