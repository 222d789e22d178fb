"""Caption metrics: CIDEr-D and the copy-oriented scores built on it.

CIDEr-D here is the consensus variant with count clipping and a Gaussian
length penalty (sigma 6), scaled to [0, 10]. Document frequencies come
from reference captions only; idf uses log(M / df) with df clipped at 1 so
unseen grams never produce an infinite weight. The copy metrics (object
F1, object CIDEr over copied-word dummy captions, average copies) consume
token sequences whose copy provenance is carried by TokenEvents.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass

from .morph import MorphTable
from .vocab import TokenEvent, surface

N_MAX = 4
SIGMA = 6.0


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class CorpusStats:
    """Per-order document frequencies over an M-image reference corpus."""

    df: tuple
    num_images: int

    def idf(self, gram) -> float:
        order = len(gram) - 1
        return math.log(self.num_images / max(1.0, self.df[order].get(gram, 0.0)))


def build_corpus_stats(references: list) -> CorpusStats:
    """references: per image, a list of tokenized captions."""
    if not references:
        raise ValueError("empty reference corpus")
    df = tuple(defaultdict(float) for _ in range(N_MAX))
    for refs in references:
        if not refs:
            raise ValueError("image with zero references")
        seen = set()
        for ref in refs:
            for n in range(1, N_MAX + 1):
                seen.update(ngrams(ref, n))
        for gram in seen:
            df[len(gram) - 1][gram] += 1.0
    return CorpusStats(tuple(dict(d) for d in df), len(references))


def _tfidf_vec(tokens, stats: CorpusStats):
    """Per order: gram -> count * idf, plus the Euclidean norms."""
    vecs = [{} for _ in range(N_MAX)]
    norms = [0.0] * N_MAX
    for n in range(1, N_MAX + 1):
        for gram, count in ngrams(tokens, n).items():
            w = count * stats.idf(gram)
            vecs[n - 1][gram] = w
            norms[n - 1] += w * w
    return vecs, [math.sqrt(x) for x in norms]


def cider_d(candidate, refs, stats: CorpusStats) -> float:
    """Consensus score of one candidate against its reference set, in [0, 10]."""
    if not refs:
        raise ValueError("cider_d needs at least one reference")
    if not candidate:
        warnings.warn("scoring an empty candidate caption", stacklevel=2)
        return 0.0
    cvecs, cnorms = _tfidf_vec(candidate, stats)
    per_order = [0.0] * N_MAX
    for ref in refs:
        rvecs, rnorms = _tfidf_vec(ref, stats)
        delta = float(len(candidate) - len(ref))
        penalty = math.exp(-(delta * delta) / (2.0 * SIGMA * SIGMA))
        for n in range(N_MAX):
            num = 0.0
            for gram, cw in cvecs[n].items():
                rw = rvecs[n].get(gram)
                if rw is not None:
                    num += min(cw, rw) * rw
            if cnorms[n] > 0.0 and rnorms[n] > 0.0:
                num /= cnorms[n] * rnorms[n]
            per_order[n] += penalty * num
    return 10.0 * sum(per_order) / (N_MAX * len(refs))


def corpus_cider(candidates, references, stats: CorpusStats) -> float:
    """Mean per-image cider_d; candidates and references align by position."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference length mismatch")
    if not candidates:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return sum(
            cider_d(c, r, stats) for c, r in zip(candidates, references)
        ) / len(candidates)


def object_f1(captions, gold_labels, morph: MorphTable, label_universe=None) -> float:
    """Micro-F1 over (image, label) mentions.

    A label is mentioned when any of its inflected forms occurs among the
    caption's tokens. The universe of labels under measurement defaults to
    the union of the gold sets; mentions outside it are ignored.
    """
    if len(captions) != len(gold_labels):
        raise ValueError("caption/gold length mismatch")
    universe = (
        set(label_universe)
        if label_universe is not None
        else set().union(*gold_labels) if gold_labels else set()
    )
    tp = fp = fn = 0
    for caption, gold in zip(captions, gold_labels):
        tokens = set(caption)
        mentioned = {
            label for label in universe if any(f in tokens for f in morph.forms_of(label))
        }
        gold = set(gold) & universe
        tp += len(mentioned & gold)
        fp += len(mentioned - gold)
        fn += len(gold - mentioned)
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def _copied_words(events) -> list:
    return [e.word for e in events if isinstance(e, TokenEvent) and e.is_copy]


def object_cider(decode_records, references, stats: CorpusStats) -> float:
    """cider_d of per-image dummy captions holding only the copied words."""
    if len(decode_records) != len(references):
        raise ValueError("record/reference length mismatch")
    if not decode_records:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        total = sum(
            cider_d(_copied_words(events), refs, stats) if _copied_words(events) else 0.0
            for events, refs in zip(decode_records, references)
        )
    return total / len(decode_records)


def avg_objects(decode_records) -> float:
    """Mean number of copy events per generated caption."""
    if not decode_records:
        return 0.0
    return sum(len(_copied_words(events)) for events in decode_records) / len(
        decode_records
    )


def caption_tokens(events) -> list:
    """Scoreable token strings of a decoded caption."""
    return surface(events)
