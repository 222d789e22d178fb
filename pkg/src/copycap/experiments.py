"""Desk-scale experiment recipes: training rows and the ablation ladder.

Everything here is sized to finish on a single CPU core: a small
transformer over the synthetic corpus, cross-entropy pre-training, then
self-critical fine-tuning under each reward variant. The ladder mirrors a
fixed set of named rows so reports are comparable across runs:

  ce          cross-entropy only
  ce+ib       cross-entropy decoded with copy bias e^2 (no extra training)
  cider       + self-critical, plain CIDEr-D reward
  r_a         + self-critical, additive copy bonus
  r_p         + self-critical, proportional copy bonus
  r_a+voa     additive bonus, fine-tuning restricted to object-aligned pairs
  r_p+voa     proportional bonus on object-aligned pairs (the full recipe)
  voa-all     object-aligned restriction in BOTH stages (known to hurt)
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .captioner import CaptionModel, ModelConfig
from .datakit import GeneratorConfig, SyntheticCorpus, build_vocabulary, generate_synthetic
from .decoder import DecodeConfig, beam_search, greedy_decode, record_from_ranked
from .morph import MorphTable
from .trainer import (
    RewardConfig,
    RunConfig,
    TrainData,
    evaluate,
    prepare_training_data,
    train,
)
from .vocab import surface

ABLATION_ROWS = ("ce", "ce+ib", "cider", "r_a", "r_p", "r_a+voa", "r_p+voa", "voa-all")

_ROW_REWARDS = {
    "cider": RewardConfig(kind="cider"),
    "r_a": RewardConfig(kind="additive", a=0.3),
    "r_p": RewardConfig(kind="proportional", p=0.3),
    "r_a+voa": RewardConfig(kind="additive", a=0.3, voa_only=True),
    "r_p+voa": RewardConfig(kind="proportional", p=0.3, voa_only=True),
    "voa-all": RewardConfig(kind="proportional", p=0.3, voa_only=True),
}


@dataclass(frozen=True)
class DeskProfile:
    """Budgeted configuration for single-core experiment runs."""

    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(seed=0))
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    ce_epochs: int = 12
    ce_batch: int = 32
    warmup: int = 300
    scst_epochs: int = 5
    scst_batch: int = 10
    scst_lr: float = 3e-4
    eval_every: int = 0
    eval_split: str = "val_in"
    inference_bias: float = math.e**2

    def ce_run(self, seed: int) -> RunConfig:
        return RunConfig(
            stage="ce",
            epochs=self.ce_epochs,
            batch_size=self.ce_batch,
            warmup=self.warmup,
            eval_every=self.eval_every,
            eval_split=self.eval_split,
            seed=seed,
        )

    def scst_run(self, seed: int, reward: RewardConfig) -> RunConfig:
        return RunConfig(
            stage="scst",
            epochs=self.scst_epochs,
            batch_size=self.scst_batch,
            scst_lr=self.scst_lr,
            eval_every=self.eval_every,
            eval_split=self.eval_split,
            reward=reward,
            seed=seed,
        )


def clone_model(model: CaptionModel) -> CaptionModel:
    """Fresh model with identical parameter values, detached from graphs."""
    twin = CaptionModel(
        model.config,
        model.vocab,
        model.morph,
        model.abstract_labels,
        seed=model.seed,
        use_abstract=model.use_abstract,
        use_morph=model.use_morph,
    )
    for name, tensor in model.params.items():
        twin.params[name].data[...] = tensor.data
    return twin


@dataclass
class RowResult:
    row: str
    seed: int
    metrics: dict  # split -> metric dict
    train_steps: int = 0
    wall_seconds: float = 0.0


class Experiment:
    """Shared corpus, caching of prepared data and CE checkpoints."""

    def __init__(self, corpus: SyntheticCorpus, profile: DeskProfile | None = None):
        self.corpus = corpus
        self.profile = profile or DeskProfile(generator=corpus.config)
        self.vocab = build_vocabulary(corpus)
        self.abstracts = tuple(sorted(corpus.taxonomy.abstract_set))
        self._data: dict = {}
        self._ce: dict = {}

    # -- construction -------------------------------------------------

    def new_model(self, seed: int, use_abstract=True, use_morph=True) -> CaptionModel:
        return CaptionModel(
            self.profile.model,
            self.vocab,
            self.corpus.morph,
            self.abstracts,
            seed=seed,
            use_abstract=use_abstract,
            use_morph=use_morph,
        )

    def data_for(self, model: CaptionModel, voa_only=False, voa_ce=False) -> TrainData:
        key = (model.use_morph, voa_only, voa_ce)
        if key not in self._data:
            self._data[key] = prepare_training_data(
                model, self.corpus, voa_only=voa_only, voa_ce=voa_ce
            )
        return self._data[key]

    # -- stages --------------------------------------------------------

    def ce_model(self, seed: int, use_abstract=True, use_morph=True, voa_ce=False):
        """Train (or fetch cached) cross-entropy model for this seed."""
        key = (seed, use_abstract, use_morph, voa_ce)
        if key not in self._ce:
            model = self.new_model(seed, use_abstract, use_morph)
            data = self.data_for(model, voa_ce=voa_ce)
            result = train(model, data, self.profile.ce_run(seed))
            self._ce[key] = (model, result)
        model, result = self._ce[key]
        return clone_model(model), result

    def scst_model(self, seed: int, reward: RewardConfig, use_abstract=True, use_morph=True, voa_ce=False):
        model, _ = self.ce_model(seed, use_abstract, use_morph, voa_ce)
        data = self.data_for(model, voa_only=reward.voa_only, voa_ce=voa_ce)
        result = train(model, data, self.profile.scst_run(seed, reward))
        return model, result

    # -- evaluation ----------------------------------------------------

    def eval_model(self, model: CaptionModel, splits=("val_in", "val_out"), ib: float = 1.0) -> dict:
        data = self.data_for(model)
        cfg = DecodeConfig(beam_size=1, ib=ib)
        return {
            split: evaluate(
                model, data.eval_sets[split], data.stats, data.morph, data.label_universe, cfg
            )
            for split in splits
        }

    def run_row(self, row: str, seed: int, splits=("val_in", "val_out")) -> RowResult:
        if row not in ABLATION_ROWS:
            raise ValueError(f"unknown row {row!r}; expected one of {ABLATION_ROWS}")
        started = time.perf_counter()
        if row == "ce":
            model, result = self.ce_model(seed)
        elif row == "ce+ib":
            model, result = self.ce_model(seed)
            metrics = self.eval_model(model, splits, ib=self.profile.inference_bias)
            return RowResult(row, seed, metrics, result.steps, time.perf_counter() - started)
        elif row == "voa-all":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model, result = self.scst_model(seed, _ROW_REWARDS[row], voa_ce=True)
        else:
            model, result = self.scst_model(seed, _ROW_REWARDS[row])
        metrics = self.eval_model(model, splits)
        return RowResult(row, seed, metrics, result.steps, time.perf_counter() - started)


def desk_corpus(profile: DeskProfile | None = None) -> SyntheticCorpus:
    profile = profile or DeskProfile()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_synthetic(profile.generator)


def run_ablation(
    experiment: Experiment,
    rows=ABLATION_ROWS,
    seeds=(0, 1, 2),
    splits=("val_in", "val_out"),
) -> dict:
    """Run the ladder and aggregate a report with means and spreads."""
    results = [experiment.run_row(row, seed, splits) for row in rows for seed in seeds]
    report = {"rows": list(rows), "seeds": list(seeds), "results": [], "summary": {}}
    for r in results:
        report["results"].append(
            {"row": r.row, "seed": r.seed, "metrics": r.metrics, "steps": r.train_steps,
             "seconds": round(r.wall_seconds, 2)}
        )
    for row in rows:
        per_row = [r for r in results if r.row == row]
        summary = {}
        for split in splits:
            agg = {}
            for metric in ("cider", "object_f1", "object_cider", "avg_objects"):
                vals = [r.metrics[split][metric] for r in per_row]
                agg[metric] = {
                    "mean": float(np.mean(vals)),
                    "spread": float(np.max(vals) - np.min(vals)),
                }
            summary[split] = agg
        report["summary"][row] = summary
    return report


def format_ablation_report(report: dict) -> str:
    """Plain-text table: one row per configuration, one block per split."""
    lines = []
    metrics = ("cider", "object_f1", "object_cider", "avg_objects")
    headers = ("CIDEr-D", "Obj F1", "Obj CIDEr", "Ave. O")
    splits = list(next(iter(report["summary"].values())).keys()) if report["summary"] else []
    for split in splits:
        lines.append(f"== {split} (seeds {report['seeds']}) ==")
        lines.append(f"{'row':<10}" + "".join(f"{h:>18}" for h in headers))
        for row in report["rows"]:
            agg = report["summary"][row][split]
            cells = "".join(
                f"{agg[m]['mean']:>11.3f} ±{agg[m]['spread'] / 2:<5.3f}" for m in metrics
            )
            lines.append(f"{row:<10}{cells}")
        lines.append("")
    return "\n".join(lines)


def decode_split(model: CaptionModel, eval_images, decode_cfg: DecodeConfig):
    """Beam-decode a split into provenance records."""
    records = []
    for image in eval_images:
        if decode_cfg.beam_size == 1:
            events = greedy_decode(model, image.inputs, decode_cfg)
            ranked = [(events, 0.0)]
        else:
            ranked = beam_search(model, image.inputs, decode_cfg)
        records.append(record_from_ranked(image.image_id, ranked))
    return records


def caption_examples(model: CaptionModel, eval_images, n: int = 5) -> list[str]:
    out = []
    for image in eval_images[:n]:
        events = greedy_decode(model, image.inputs, DecodeConfig(beam_size=1))
        out.append(f"{image.image_id}: {' '.join(surface(events))}")
    return out
