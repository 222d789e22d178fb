"""Joint output-vector layout: |V| vocabulary columns then per-object form blocks.

A step's output distribution concatenates vocabulary probabilities with,
for each copyable object i, probabilities over its s_i surface forms. The
layout maps columns to TokenEvents and back, and builds the column masks
the decoder needs (copy-once, copy-vocabulary masking).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..vocab import Vocabulary, copy_event, vocab_event

MASS_TOL = 1e-8


@dataclass(frozen=True)
class DistributionLayout:
    vocab: Vocabulary
    labels: tuple  # per copyable object, its taxonomy label
    forms: tuple  # per copyable object, its surface-form tuple

    @property
    def k_f(self) -> int:
        return len(self.labels)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def width(self) -> int:
        return self.vocab_size + sum(len(f) for f in self.forms)

    def copy_block(self, i: int) -> slice:
        start = self.vocab_size + sum(len(f) for f in self.forms[:i])
        return slice(start, start + len(self.forms[i]))

    def column_of(self, event) -> int:
        if event.is_copy:
            return self.copy_block(event.obj_index).start + event.form
        return self.vocab.id_of(event.word)

    def event_of(self, column: int):
        if column < self.vocab_size:
            return vocab_event(self.vocab.word_of(column))
        offset = column - self.vocab_size
        for i, forms in enumerate(self.forms):
            if offset < len(forms):
                return copy_event(i, offset, forms[offset])
            offset -= len(forms)
        raise IndexError(f"column {column} outside layout width {self.width}")

    def copyable_vocab_columns(self) -> np.ndarray:
        """Vocabulary columns whose word doubles as some object's copy form."""
        cols = {
            self.vocab.id_of(f)
            for forms in self.forms
            for f in forms
            if f in self.vocab
        }
        return np.array(sorted(cols), dtype=np.int64)

    def object_columns(self, i: int) -> np.ndarray:
        block = self.copy_block(i)
        return np.arange(block.start, block.stop, dtype=np.int64)


@dataclass
class OutputDistribution:
    """One decoding step's probabilities over the joint layout."""

    probs: np.ndarray
    layout: DistributionLayout

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (self.layout.width,):
            raise ValueError(
                f"distribution width {self.probs.shape} != layout {self.layout.width}"
            )
        if (self.probs < 0).any():
            raise ValueError("negative probability entry")
        if abs(self.probs.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"probability mass {self.probs.sum()} outside 1 +/- {MASS_TOL}")

    @property
    def vocab_part(self) -> np.ndarray:
        return self.probs[: self.layout.vocab_size]

    def copy_part(self, i: int) -> np.ndarray:
        return self.probs[self.layout.copy_block(i)]

    def copy_mass(self) -> float:
        return float(self.probs[self.layout.vocab_size :].sum())
