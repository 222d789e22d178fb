"""Word-level vocabulary and the token-event algebra captions are made of.

Every decoding step emits a TokenEvent: either a vocabulary word or a copy
of object i rendered in inflected form j. The vocabulary is closed: built
once from training captions plus every registered label surface form, with
begin/end sentinels reserved at fixed indices.
"""

from __future__ import annotations

from dataclasses import dataclass

BOS = "<s>"
EOS = "</s>"

VOCAB = "vocab"
COPY = "copy"


def tokenize(text: str) -> list:
    return text.lower().split()


@dataclass(frozen=True)
class TokenEvent:
    kind: str
    word: str
    obj_index: int | None = None
    form: int | None = None

    def __post_init__(self):
        if self.kind == VOCAB:
            if self.obj_index is not None or self.form is not None:
                raise ValueError("vocabulary events carry no copy fields")
        elif self.kind == COPY:
            if self.obj_index is None or self.form is None:
                raise ValueError("copy events need an object index and a form")
        else:
            raise ValueError(f"unknown event kind {self.kind!r}")

    @property
    def is_copy(self) -> bool:
        return self.kind == COPY


def vocab_event(word: str) -> TokenEvent:
    return TokenEvent(VOCAB, word)


def copy_event(obj_index: int, form: int, word: str) -> TokenEvent:
    return TokenEvent(COPY, word, obj_index, form)


def surface(events) -> list:
    """Token strings of a caption, sentinels excluded."""
    return [e.word for e in events if e.word not in (BOS, EOS)]


class Vocabulary:
    """Immutable word <-> index mapping with BOS=0, EOS=1."""

    def __init__(self, words):
        words = list(words)
        if words[:2] != [BOS, EOS]:
            raise ValueError("vocabulary must reserve BOS, EOS at indices 0, 1")
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary entries")
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(words)}

    @staticmethod
    def build(caption_token_lists, extra_words=()) -> "Vocabulary":
        seen = dict.fromkeys(w for toks in caption_token_lists for w in toks)
        seen.update(dict.fromkeys(extra_words))
        seen.pop(BOS, None)
        seen.pop(EOS, None)
        return Vocabulary([BOS, EOS] + sorted(seen))

    def id_of(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise KeyError(f"word {word!r} not in the closed vocabulary") from None

    def word_of(self, idx: int) -> str:
        return self.words[idx]

    def __contains__(self, word) -> bool:
        return word in self.index

    def __len__(self) -> int:
        return len(self.words)
