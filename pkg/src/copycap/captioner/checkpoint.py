"""Checkpoint = numcore array file + JSON manifest restoring the exact model."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .. import numcore as nc
from ..morph import MorphTable
from ..vocab import Vocabulary
from .config import ModelConfig
from .model import CaptionModel

MANIFEST_SUFFIX = ".manifest.json"


def manifest_path(path) -> Path:
    return Path(str(path) + MANIFEST_SUFFIX)


def save_checkpoint(path, model: CaptionModel, extra: dict | None = None) -> None:
    nc.save_arrays(path, {name: t.data for name, t in sorted(model.params.items())})
    doc = {
        "format": 1,
        "config": asdict(model.config),
        "vocab": list(model.vocab.words),
        "morph": {k: list(v) for k, v in sorted(model.morph.forms.items())},
        "abstract_labels": list(model.abstract_labels),
        "seed": model.seed,
        "use_abstract": model.use_abstract,
        "use_morph": model.use_morph,
        "extra": extra or {},
    }
    manifest_path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> CaptionModel:
    doc = json.loads(manifest_path(path).read_text())
    if doc.get("format") != 1:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    model = CaptionModel(
        ModelConfig(**doc["config"]),
        Vocabulary(doc["vocab"]),
        MorphTable({k: tuple(v) for k, v in doc["morph"].items()}),
        tuple(doc["abstract_labels"]),
        seed=doc["seed"],
        use_abstract=doc["use_abstract"],
        use_morph=doc["use_morph"],
    )
    arrays = nc.load_arrays(path)
    if set(arrays) != set(model.params):
        missing = set(model.params) ^ set(arrays)
        raise ValueError(f"{path}: parameter set mismatch ({sorted(missing)[:4]}...)")
    for name, values in arrays.items():
        if model.params[name].shape != values.shape:
            raise ValueError(f"{path}: {name} shape {values.shape} != {model.params[name].shape}")
        model.params[name].data = values
    return model


def checkpoint_extra(path) -> dict:
    return json.loads(manifest_path(path).read_text()).get("extra", {})
