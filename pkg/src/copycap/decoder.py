"""Caption generation: beam search, greedy and stochastic decoding.

Search-time behaviours shared by every entry point:

  * copy bias: copy-block probabilities can be multiplied by a factor b and
    the whole vector renormalized, shifting mass toward copying without
    touching the relative order inside either group;
  * repeated-bigram penalty: a candidate token that would recreate a bigram
    already present in the hypothesis has its (negative) log-probability
    amplified by a fixed factor, making the repeat strictly less attractive;
  * copy-once: each detected object index may be emitted at most once per
    hypothesis;
  * length normalization: final hypothesis score is the penalized
    log-probability sum divided by the number of emitted tokens.

Sampling is the training-side entry point: it draws from the exact model
distribution (optionally with label-form vocabulary masking) and returns the
realized path log-probabilities for the policy gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .captioner import CaptionModel, CaptionSession, ObjectInputs, OutputDistribution
from .captioner.layout import DistributionLayout
from .vocab import EOS, TokenEvent, surface

E_SQUARED = math.exp(2.0)

__all__ = [
    "DecodeConfig",
    "DecodeRecord",
    "E_SQUARED",
    "apply_inference_bias",
    "beam_search",
    "bigram_penalty",
    "draw_column",
    "event_from_json",
    "event_to_json",
    "greedy_decode",
    "load_decode_records",
    "record_from_ranked",
    "sample_caption",
    "save_decode_records",
    "scst_vocab_mask",
]


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    max_len: int = 20
    bigram_penalty: float = E_SQUARED
    length_normalize: bool = True
    copy_once: bool = True
    scst_vocab_mask: bool = False
    ib: float = 1.0
    literal_division: bool = False

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.ib <= 0:
            raise ValueError(f"copy bias must be positive, got {self.ib}")
        if self.max_len < 2:
            raise ValueError(f"max_len must allow at least one token, got {self.max_len}")
        if self.bigram_penalty <= 0:
            raise ValueError(f"bigram penalty factor must be positive, got {self.bigram_penalty}")


def apply_inference_bias(dist: OutputDistribution, b: float) -> OutputDistribution:
    """Multiply copy-block mass by b and renormalize.

    b = 1 returns the input unchanged (bit-exact); b > 1 favours copying,
    b < 1 favours vocabulary words. Ranking within each group is preserved.
    """
    if b <= 0:
        raise ValueError(f"bias must be positive, got {b}")
    if b == 1.0:
        return dist
    probs = dist.probs.copy()
    v = dist.layout.vocab_size
    probs[v:] *= b
    total = probs.sum()
    if total <= 0:
        raise ValueError("distribution has no mass after bias")
    return OutputDistribution(probs / total, dist.layout)


def bigram_penalty(
    logprob: float,
    candidate: TokenEvent | str,
    history: Sequence[TokenEvent],
    penalty: float = E_SQUARED,
    literal: bool = False,
) -> float:
    """Penalize a candidate that recreates a bigram already in the history.

    The penalized value is logprob * penalty for negative log-probabilities
    so the score strictly decreases. `literal` divides instead, which makes
    repeats MORE attractive; it exists only for comparison runs.
    """
    if not history:
        return logprob
    word = candidate.word if isinstance(candidate, TokenEvent) else candidate
    words = [ev.word for ev in history]
    seen = set(zip(words, words[1:]))
    if (words[-1], word) not in seen:
        return logprob
    if literal:
        return logprob / penalty
    return logprob * penalty if logprob < 0 else logprob


def scst_vocab_mask(layout: DistributionLayout) -> np.ndarray | None:
    """Vocabulary mask that zeroes words reachable through a copy block."""
    cols = layout.copyable_vocab_columns()
    if cols.size == 0:
        return None
    mask = np.ones(layout.vocab_size)
    mask[cols] = 0.0
    return mask


@dataclass(frozen=True)
class _Hypothesis:
    events: tuple[TokenEvent, ...] = ()
    cols: tuple[int, ...] = ()
    logprobs: tuple[float, ...] = ()
    raw: float = 0.0
    finished: bool = False
    copied: frozenset = frozenset()

    def extend(self, event: TokenEvent, col: int, logprob: float) -> "_Hypothesis":
        copied = self.copied | {event.obj_index} if event.is_copy else self.copied
        return _Hypothesis(
            events=self.events + (event,),
            cols=self.cols + (col,),
            logprobs=self.logprobs + (logprob,),
            raw=self.raw + logprob,
            finished=event.word == EOS,
            copied=copied,
        )


def _score(hyp: _Hypothesis, cfg: DecodeConfig) -> float:
    if not hyp.events:
        return 0.0
    return hyp.raw / len(hyp.events) if cfg.length_normalize else hyp.raw


def _rank_key(hyp: _Hypothesis, cfg: DecodeConfig):
    # ties: higher score, then earlier end-of-sentence, then lexicographic ids
    eos_at = len(hyp.events) if hyp.finished else math.inf
    return (-_score(hyp, cfg), eos_at, hyp.cols)


def _step_logprobs(
    probs: np.ndarray,
    hyp: _Hypothesis,
    layout: DistributionLayout,
    cfg: DecodeConfig,
    col_words: Sequence[str],
) -> np.ndarray:
    """Adjusted log-probability for every column; -inf marks forbidden ones."""
    with np.errstate(divide="ignore"):
        lps = np.where(probs > 0, np.log(np.maximum(probs, 1e-300)), -np.inf)
    if hyp.events:
        last = hyp.events[-1].word
        words = [ev.word for ev in hyp.events]
        repeats = {b for a, b in zip(words, words[1:]) if a == last}
        if repeats:
            hit = np.fromiter((w in repeats for w in col_words), dtype=bool, count=len(col_words))
            if cfg.literal_division:
                lps = np.where(hit, lps / cfg.bigram_penalty, lps)
            else:
                lps = np.where(hit & (lps < 0), lps * cfg.bigram_penalty, lps)
    if cfg.copy_once and hyp.copied:
        for i in hyp.copied:
            lps[list(layout.object_columns(i))] = -np.inf
    return lps


def beam_search(
    model: CaptionModel, image: ObjectInputs, cfg: DecodeConfig
) -> list[tuple[list[TokenEvent], float]]:
    """Ranked hypotheses for one image. Deterministic for fixed inputs."""
    session = CaptionSession(model, image)
    layout = session.layout
    steps = min(cfg.max_len - 1, session.max_new_tokens)
    mask = scst_vocab_mask(layout) if cfg.scst_vocab_mask else None
    col_words = [layout.event_of(c).word for c in range(layout.width)]

    beams = [_Hypothesis()]
    for _ in range(steps):
        if all(h.finished for h in beams):
            break
        candidates: list[_Hypothesis] = [h for h in beams if h.finished]
        for hyp in beams:
            if hyp.finished:
                continue
            dist = apply_inference_bias(
                session.distribution(list(hyp.events), vocab_mask=mask), cfg.ib
            )
            lps = _step_logprobs(dist.probs, hyp, layout, cfg, col_words)
            live = np.flatnonzero(np.isfinite(lps))
            if live.size > cfg.beam_size:
                order = np.lexsort((live, -lps[live]))[: cfg.beam_size]
                live = live[order]
            for col in live:
                candidates.append(hyp.extend(layout.event_of(int(col)), int(col), float(lps[col])))
        candidates.sort(key=lambda h: _rank_key(h, cfg))
        beams = candidates[: cfg.beam_size]
    ranked = sorted(beams, key=lambda h: _rank_key(h, cfg))
    return [(list(h.events), _score(h, cfg)) for h in ranked]


def greedy_decode(
    model: CaptionModel, image: ObjectInputs, cfg: DecodeConfig | None = None
) -> list[TokenEvent]:
    """Pick the single best adjusted candidate at every step."""
    cfg = cfg or DecodeConfig(beam_size=1)
    session = CaptionSession(model, image)
    layout = session.layout
    steps = min(cfg.max_len - 1, session.max_new_tokens)
    mask = scst_vocab_mask(layout) if cfg.scst_vocab_mask else None
    col_words = [layout.event_of(c).word for c in range(layout.width)]

    hyp = _Hypothesis()
    for _ in range(steps):
        dist = apply_inference_bias(
            session.distribution(list(hyp.events), vocab_mask=mask), cfg.ib
        )
        lps = _step_logprobs(dist.probs, hyp, layout, cfg, col_words)
        col = int(lps.argmax())
        hyp = hyp.extend(layout.event_of(col), col, float(lps[col]))
        if hyp.finished:
            break
    return list(hyp.events)


def draw_column(rng: np.random.Generator, probs: np.ndarray) -> int:
    """One multinomial draw over distribution columns."""
    total = probs.sum()
    if total <= 0:
        raise ValueError("masked distribution has no mass")
    return int(rng.choice(len(probs), p=probs / total))


def sample_caption(
    model: CaptionModel,
    image: ObjectInputs,
    cfg: DecodeConfig,
    rng: np.random.Generator,
) -> tuple[list[TokenEvent], list[float]]:
    """Multinomial sample with the exact path log-probabilities.

    Draws from the model distribution after optional label-form vocabulary
    masking; no search-time adjustments (bias, bigram penalty, copy-once)
    touch the sampled path, so the returned log-probabilities are the true
    policy values needed by the gradient.
    """
    session = CaptionSession(model, image)
    layout = session.layout
    steps = min(cfg.max_len - 1, session.max_new_tokens)
    mask = scst_vocab_mask(layout) if cfg.scst_vocab_mask else None

    events: list[TokenEvent] = []
    logprobs: list[float] = []
    for _ in range(steps):
        dist = session.distribution(events, vocab_mask=mask)
        col = draw_column(rng, dist.probs)
        events.append(layout.event_of(col))
        logprobs.append(float(np.log(dist.probs[col])))
        if events[-1].word == EOS:
            break
    return events, logprobs


def event_to_json(event: TokenEvent) -> dict:
    if event.is_copy:
        return {
            "kind": "copy",
            "word": event.word,
            "object": event.obj_index,
            "form": event.form,
        }
    return {"kind": "vocab", "word": event.word}


def event_from_json(obj: dict) -> TokenEvent:
    if obj["kind"] == "copy":
        return TokenEvent("copy", obj["word"], obj_index=obj["object"], form=obj["form"])
    if obj["kind"] == "vocab":
        return TokenEvent("vocab", obj["word"])
    raise ValueError(f"unknown token kind {obj['kind']!r}")


@dataclass(frozen=True)
class DecodeRecord:
    """Per-image decode output: ranked captions with token provenance."""

    image_id: str
    captions: tuple[tuple[TokenEvent, ...], ...]
    scores: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.scores and len(self.scores) != len(self.captions):
            raise ValueError("one score per caption required")

    @property
    def best(self) -> tuple[TokenEvent, ...]:
        return self.captions[0]

    def best_surface(self) -> list[str]:
        return surface(self.best)


def _strip_eos(events: Iterable[TokenEvent]) -> tuple[TokenEvent, ...]:
    return tuple(ev for ev in events if ev.word != EOS)


def record_from_ranked(
    image_id: str, ranked: Sequence[tuple[Sequence[TokenEvent], float]]
) -> DecodeRecord:
    return DecodeRecord(
        image_id=image_id,
        captions=tuple(_strip_eos(events) for events, _ in ranked),
        scores=tuple(score for _, score in ranked),
    )


def save_decode_records(path, records: Sequence[DecodeRecord]) -> None:
    payload = [
        {
            "image_id": r.image_id,
            "captions": [
                {"score": s, "tokens": [event_to_json(ev) for ev in cap]}
                for cap, s in zip(r.captions, r.scores or [0.0] * len(r.captions))
            ],
        }
        for r in records
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def load_decode_records(path) -> list[DecodeRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    records = []
    for entry in payload:
        caps = tuple(
            tuple(event_from_json(t) for t in c["tokens"]) for c in entry["captions"]
        )
        scores = tuple(float(c["score"]) for c in entry["captions"])
        records.append(DecodeRecord(entry["image_id"], caps, scores))
    return records
