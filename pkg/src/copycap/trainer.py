"""Training: cross-entropy pre-training and self-critical fine-tuning.

The two stages share the optimizer stack (Adam, global-norm gradient
clipping) but differ in objective and learning-rate schedule:

  * cross-entropy: teacher forcing against reference captions whose object
    mentions are rewritten into copy targets, warmup/decay learning rate
    lrate = d^-0.5 * min(S^-0.5, S * W^-1.5);
  * self-critical: REINFORCE with the greedy decode as baseline, reward =
    CIDEr-D optionally augmented with a copy-count bonus, constant learning
    rate halved after `patience` evaluations without improvement.

Reward shaping follows two variants: additive (CIDEr + a*C) and
proportional (CIDEr * (1 + p*C)) where C counts copy actions in the
sampled caption. The proportional form gives no bonus to captions whose
CIDEr is 0, which suppresses indiscriminate object stuffing.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .captioner import CaptionModel, ObjectInputs, prepare_inputs
from .datakit import Dataset, ImageRecord, SyntheticCorpus
from .decoder import DecodeConfig, beam_search, greedy_decode, sample_caption, scst_vocab_mask
from .metrics import (
    CorpusStats,
    avg_objects,
    build_corpus_stats,
    cider_d,
    corpus_cider,
    object_cider,
    object_f1,
)
from .morph import MorphTable
from .vocab import EOS, TokenEvent, copy_event, surface, tokenize, vocab_event

__all__ = [
    "Adam",
    "EvalImage",
    "RewardConfig",
    "RunConfig",
    "TrainData",
    "TrainResult",
    "ce_step",
    "clip_gradients",
    "evaluate",
    "events_from_reference",
    "form_selection_accuracy",
    "lr_schedule_ce",
    "lr_schedule_scst",
    "prepare_training_data",
    "reward",
    "scst_step",
    "train",
    "voa_filter",
]

REWARD_KINDS = ("cider", "additive", "proportional")


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "cider"
    a: float = 0.3
    p: float = 0.3
    voa_only: bool = False

    def __post_init__(self) -> None:
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"reward kind must be one of {REWARD_KINDS}, got {self.kind!r}")
        if self.a <= 0 or self.p <= 0:
            raise ValueError("copy-bonus coefficients must be positive")


# ----------------------------------------------------------------------
# optimizer stack
# ----------------------------------------------------------------------


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, nc.Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-9,
    ):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: Sequence[nc.Tensor], clip: float = 0.1, mode: str = "norm") -> float:
    """Scale gradients in place; returns the pre-clip global norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if mode == "norm":
        if norm > clip:
            scale = clip / norm
            for g in grads:
                g *= scale
    elif mode == "value":
        for g in grads:
            np.clip(g, -clip, clip, out=g)
    else:
        raise ValueError(f"unknown clip mode {mode!r}")
    return norm


def lr_schedule_ce(S: int, W: int, d: int) -> float:
    """Warmup then inverse-sqrt decay; peak d^-0.5 * W^-0.5 at S = W."""
    if S < 1 or W < 1:
        raise ValueError("step and warmup must be >= 1")
    return d**-0.5 * min(S**-0.5, S * W**-1.5)


def lr_schedule_scst(
    eval_history: Sequence[float],
    initial: float = 1e-6,
    patience: int = 3,
    floor: float = 1e-9,
) -> float:
    """Halve after `patience` consecutive evaluations without a new best."""
    lr = initial
    best = -math.inf
    bad = 0
    for score in eval_history:
        if score > best:
            best = score
            bad = 0
        else:
            bad += 1
            if bad == patience:
                lr = max(lr / 2.0, floor)
                bad = 0
    return lr


# ----------------------------------------------------------------------
# cross-entropy stage
# ----------------------------------------------------------------------


def events_from_reference(tokens, layout, confidences, vocab) -> list[TokenEvent]:
    """Rewrite a reference into teacher-forcing targets ending with EOS.

    A word matching a retained object's registered form becomes a copy
    target for that object; when several objects share the form the highest
    confidence one wins. Everything else must be a vocabulary word.
    """
    events: list[TokenEvent] = []
    for word in tokens:
        best = None
        for i, forms in enumerate(layout.forms):
            if word in forms and (best is None or confidences[i] > confidences[best]):
                best = i
        if best is not None:
            events.append(copy_event(best, layout.forms[best].index(word), word))
        elif word in vocab:
            events.append(vocab_event(word))
        else:
            raise ValueError(f"target {word!r} is neither a vocabulary word nor a copyable form")
    events.append(vocab_event(EOS))
    return events


def _path_nll(model: CaptionModel, inputs, events, vocab_mask=None, train=False, rng=None):
    """Graph node for sum of -log P(event_t); also returns step count."""
    dists, layout = model.teacher_forced(inputs, events, vocab_mask=vocab_mask, train=train, rng=rng)
    onehot = np.zeros((len(events), layout.width))
    for t, ev in enumerate(events):
        onehot[t, layout.column_of(ev)] = 1.0
    picked = nc.matmul(nc.multiply(dists, nc.Tensor(onehot)), nc.Tensor(np.ones((layout.width, 1))))
    return nc.scale(nc.sum_all(nc.log(picked)), -1.0), len(events)


def ce_step(model: CaptionModel, batch, rng=None) -> float:
    """Mean per-token negative log-likelihood; gradients accumulate in place.

    Dropout is active only when an rng is supplied. Gradients are zeroed at
    entry, so one call corresponds to one optimizer step.
    """
    if not batch:
        raise ValueError("empty batch")
    model.zero_grad()
    total = 0.0
    for inputs, events in batch:
        nll, steps = _path_nll(model, inputs, events, train=rng is not None, rng=rng)
        loss = nc.scale(nll, 1.0 / (steps * len(batch)))
        nc.backward(loss)
        total += float(loss.data)
    return total


# ----------------------------------------------------------------------
# self-critical stage
# ----------------------------------------------------------------------


def reward(caption, refs, stats: CorpusStats, cfg: RewardConfig) -> float:
    """Caption reward; C counts copy actions in the caption."""
    tokens = surface(caption)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = cider_d(tokens, refs, stats)
    if cfg.kind == "cider":
        return base
    c = sum(1 for ev in caption if ev.is_copy)
    if cfg.kind == "additive":
        return base + cfg.a * c
    return base * (1.0 + cfg.p * c)


def scst_step(
    model: CaptionModel,
    batch,
    reward_cfg: RewardConfig,
    stats: CorpusStats,
    rng: np.random.Generator,
    baseline: str = "greedy",
    reward_fn: Callable | None = None,
) -> tuple[float, dict]:
    """One policy-gradient step over a batch of (inputs, references).

    Per image: sample a caption under label-form vocabulary masking, score
    it against the greedy decode, and push gradients through the sampled
    path scaled by the advantage. A zero advantage contributes no gradient.
    """
    if not batch:
        raise ValueError("empty batch")
    if baseline not in ("greedy", "beam_mean"):
        raise ValueError(f"unknown baseline {baseline!r}")
    model.zero_grad()
    score = reward_fn or (lambda events, refs: reward(events, refs, stats, reward_cfg))
    sample_cfg = DecodeConfig(beam_size=1, max_len=model.config.max_len, scst_vocab_mask=True)
    total = 0.0
    sampled_r = 0.0
    baseline_r = 0.0
    for inputs, refs in batch:
        events, logprobs = sample_caption(model, inputs, sample_cfg, rng)
        if baseline == "greedy":
            base_r = score(greedy_decode(model, inputs, sample_cfg), refs)
        else:
            ranked = beam_search(model, inputs, replace(sample_cfg, beam_size=3))
            base_r = sum(score(ev, refs) for ev, _ in ranked) / len(ranked)
        samp_r = score(events, refs)
        advantage = samp_r - base_r
        sampled_r += samp_r
        baseline_r += base_r
        total += -advantage * sum(logprobs) / len(batch)
        if advantage == 0.0:
            continue
        mask = scst_vocab_mask(model.layout_for(inputs))
        nll, _ = _path_nll(model, inputs, events, vocab_mask=mask)
        nc.backward(nc.scale(nll, advantage / len(batch)))
    info = {
        "sample_reward": sampled_r / len(batch),
        "baseline_reward": baseline_r / len(batch),
    }
    return total, info


# ----------------------------------------------------------------------
# dataset preparation and evaluation
# ----------------------------------------------------------------------


def voa_filter(dataset: Dataset, copyable_labels: dict, morph: MorphTable) -> Dataset:
    """Keep only (image, reference) pairs aligned with a retained object.

    A pair survives when the reference contains at least one registered
    form of one of the image's retained copyable labels. Images with no
    surviving references are dropped entirely.
    """
    kept = []
    for img in dataset.images:
        forms = {
            f for label in copyable_labels.get(img.id, ()) for f in morph.forms_of(label)
        }
        refs = [r for r in img.references if set(tokenize(r)) & forms]
        if refs:
            kept.append(ImageRecord(img.id, img.copyable, img.visual, refs))
    return Dataset(split=dataset.split, images=kept)


@dataclass(frozen=True)
class EvalImage:
    image_id: str
    inputs: ObjectInputs
    refs: tuple
    gold: frozenset


@dataclass
class TrainData:
    ce_pairs: list
    scst_items: list
    eval_sets: dict
    stats: CorpusStats
    morph: MorphTable
    label_universe: tuple
    retained: dict


def mentioned_labels(refs, universe, morph: MorphTable) -> frozenset:
    words = {t for ref in refs for t in ref}
    return frozenset(
        label for label in universe if any(f in words for f in morph.forms_of(label))
    )


def prepare_training_data(
    model: CaptionModel,
    corpus: SyntheticCorpus,
    eval_splits: tuple = ("val_in", "val_near", "val_out"),
    voa_only: bool = False,
    voa_ce: bool = False,
) -> TrainData:
    """Expand a corpus into teacher-forcing pairs and evaluation sets.

    voa_only restricts the self-critical items to object-aligned pairs;
    voa_ce additionally restricts the cross-entropy pairs, which is known
    to hurt and exists for the ablation ladder.
    """
    cfg = corpus.config
    morph = corpus.morph
    # person is frequency-excluded from copying by design, so it is not an
    # evaluation target; F1 ranges over the copyable label inventory
    universe = tuple(cfg.target_labels())
    abstracts = model.abstract_labels

    def inputs_for(img: ImageRecord) -> ObjectInputs:
        return prepare_inputs(
            img,
            corpus.taxonomy,
            morph,
            abstracts,
            corpus.caption_freq,
            freq_threshold=cfg.freq_threshold,
            overlap_threshold=cfg.overlap_threshold,
        )

    train_ds = corpus.datasets["train"]
    retained = {}
    inputs_cache = {}
    for img in train_ds.images:
        inputs_cache[img.id] = inputs_for(img)
        retained[img.id] = set(inputs_cache[img.id].labels)

    stats = build_corpus_stats(train_ds.references())

    scst_ds = voa_filter(train_ds, retained, morph) if voa_only else train_ds
    ce_ds = voa_filter(train_ds, retained, morph) if voa_ce else train_ds

    ce_pairs = []
    for img in ce_ds.images:
        inputs = inputs_cache[img.id]
        layout = model.layout_for(inputs)
        confid = [d.confidence for d in inputs.F]
        for ref in img.tokenized_references():
            ce_pairs.append((inputs, events_from_reference(ref, layout, confid, model.vocab)))

    scst_items = [
        (inputs_cache[img.id], tuple(img.tokenized_references())) for img in scst_ds.images
    ]

    eval_sets = {}
    for split in eval_splits:
        images = corpus.datasets[split].images
        eval_sets[split] = [
            EvalImage(
                image_id=img.id,
                inputs=inputs_for(img),
                refs=tuple(tuple(r) for r in img.tokenized_references()),
                gold=mentioned_labels(img.tokenized_references(), universe, morph),
            )
            for img in images
        ]

    return TrainData(ce_pairs, scst_items, eval_sets, stats, morph, universe, retained)


def evaluate(
    model: CaptionModel,
    eval_images: Sequence[EvalImage],
    stats: CorpusStats,
    morph: MorphTable,
    label_universe=None,
    decode_cfg: DecodeConfig | None = None,
) -> dict:
    """Greedy-decode a split and score it on all caption metrics."""
    cfg = decode_cfg or DecodeConfig(beam_size=1)
    decoded = [greedy_decode(model, e.inputs, cfg) for e in eval_images]
    captions = [surface(ev) for ev in decoded]
    refs = [list(map(list, e.refs)) for e in eval_images]
    gold = [e.gold for e in eval_images]
    return {
        "cider": corpus_cider(captions, refs, stats),
        "object_f1": object_f1(captions, gold, morph, label_universe),
        "object_cider": object_cider(decoded, refs, stats),
        "avg_objects": avg_objects(decoded),
    }


def form_selection_accuracy(model: CaptionModel, pairs) -> tuple[float, float]:
    """Teacher-forced form choice accuracy over (inputs, events) pairs.

    Returns (overall, plural-context) accuracy across copy targets whose
    object has more than one registered form; the selector picks the argmax
    column inside the object's block.
    """
    hits = seen = hits_pl = seen_pl = 0
    for inputs, events in pairs:
        if not any(ev.is_copy for ev in events):
            continue
        dists, layout = model.teacher_forced(inputs, events)
        for t, ev in enumerate(events):
            if not ev.is_copy or len(layout.forms[ev.obj_index]) < 2:
                continue
            block = dists.data[t, layout.copy_block(ev.obj_index)]
            pick = int(block.argmax())
            seen += 1
            hits += pick == ev.form
            if ev.form > 0:
                seen_pl += 1
                hits_pl += pick == ev.form
    overall = hits / seen if seen else 0.0
    plural = hits_pl / seen_pl if seen_pl else 0.0
    return overall, plural


def surface_form_accuracy(model: CaptionModel, pairs) -> dict:
    """Teacher-forced accuracy of emitting the exact reference surface word.

    A position counts when the reference word is an inflected (non-base)
    form of an object present in the image's copy candidates. The predicted
    surface is whatever word the argmax column maps to, vocabulary or copy,
    so models without a form selector are scored on the same footing.
    """
    hits = seen = 0
    for inputs, events in pairs:
        with nc.no_grad():
            dists, layout = model.teacher_forced(inputs, events)
        inflected = {
            f
            for label in set(layout.labels)
            for f in model.morph.forms_of(label)[1:]
        }
        for t, ev in enumerate(events):
            if ev.word not in inflected:
                continue
            seen += 1
            pick = layout.event_of(int(dists.data[t].argmax()))
            hits += pick.word == ev.word
    return {"accuracy": hits / seen if seen else 0.0, "contexts": seen}


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    stage: str = "ce"
    epochs: int = 15
    batch_size: int = 100
    seed: int = 0
    warmup: int = 20000
    eval_every: int = 3000
    eval_split: str = "val_in"
    scst_lr: float = 1e-6
    plateau_patience: int = 3
    lr_floor: float = 1e-9
    clip: float = 0.1
    clip_mode: str = "norm"
    reward: RewardConfig = field(default_factory=RewardConfig)
    baseline: str = "greedy"
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.stage not in ("ce", "scst"):
            raise ValueError(f"stage must be 'ce' or 'scst', got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch or batch size")


@dataclass
class TrainResult:
    log: list
    eval_history: list
    steps: int


def train(model: CaptionModel, data: TrainData, cfg: RunConfig) -> TrainResult:
    """Run one stage to completion. Deterministic for a fixed seed."""
    if cfg.stage == "ce" and cfg.reward.voa_only:
        warnings.warn(
            "object-aligned filtering is intended for the self-critical stage; "
            "applying it to cross-entropy training hurts generalization"
        )
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(model.named_trainable())
    items = data.ce_pairs if cfg.stage == "ce" else data.scst_items
    if not items and cfg.epochs > 0:
        raise ValueError("no training items")
    log: list[dict] = []
    eval_history: list[float] = []
    step = 0

    def run_eval() -> dict:
        metrics = evaluate(
            model, data.eval_sets[cfg.eval_split], data.stats, data.morph, data.label_universe
        )
        eval_history.append(metrics["cider"])
        return metrics

    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        order = rng.permutation(len(items))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[lo : lo + cfg.batch_size]]
            if cfg.stage == "ce":
                lr = lr_schedule_ce(step + 1, cfg.warmup, model.config.d)
                loss = ce_step(model, batch, rng=rng)
                info = {}
            else:
                lr = lr_schedule_scst(
                    eval_history, cfg.scst_lr, cfg.plateau_patience, cfg.lr_floor
                )
                loss, info = scst_step(
                    model, batch, cfg.reward, data.stats, rng, baseline=cfg.baseline
                )
            norm = clip_gradients(model.trainable(), cfg.clip, cfg.clip_mode)
            adam.step(lr)
            step += 1
            entry = {"step": step, "epoch": epoch, "lr": lr, "loss": loss, "grad_norm": norm}
            entry.update(info)
            if cfg.eval_every and step % cfg.eval_every == 0:
                entry.update(split=cfg.eval_split, **run_eval())
            log.append(entry)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break

    if step and (not log or "cider" not in log[-1]):
        final = {"step": step, "split": cfg.eval_split, **run_eval()}
        log.append(final)
    return TrainResult(log=log, eval_history=eval_history, steps=step)
