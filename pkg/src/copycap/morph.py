"""Surface-form tables: each label owns an ordered list of inflections.

Form 0 is the base (singular) string; form 1, when present, is the plural
built by rule or taken from an irregular-override table. Labels like
"deer" keep a single form. Model parameters for choosing among forms live
with the captioner; this table only fixes the strings and their order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

# overrides map base -> full form list (may be single-form)
IRREGULAR_PLURALS = {
    "deer": ("deer",),
    "sheep": ("sheep",),
    "fish": ("fish",),
    "person": ("person", "people"),
    "child": ("child", "children"),
    "man": ("man", "men"),
    "woman": ("woman", "women"),
    "mouse": ("mouse", "mice"),
    "goose": ("goose", "geese"),
    "wolf": ("wolf", "wolves"),
    "leaf": ("leaf", "leaves"),
}

_SIBILANT_ENDINGS = ("s", "x", "z", "ch", "sh")
_VOWELS = "aeiou"


def pluralize(word: str) -> str:
    if word.endswith(_SIBILANT_ENDINGS):
        return word + "es"
    if word.endswith("y") and len(word) > 1 and word[-2] not in _VOWELS:
        return word[:-1] + "ies"
    return word + "s"


@dataclass(frozen=True)
class MorphTable:
    forms: dict

    def __post_init__(self):
        for label, fs in self.forms.items():
            if not fs:
                raise ValueError(f"label {label!r} has no surface forms")
            if len(set(fs)) != len(fs):
                raise ValueError(f"label {label!r} repeats a surface form")

    def forms_of(self, label) -> tuple:
        return self.forms[label]

    def num_forms(self, label) -> int:
        return len(self.forms[label])

    def labels(self) -> list:
        return sorted(self.forms)

    def all_forms(self) -> set:
        return {f for fs in self.forms.values() for f in fs}

    def form_index(self, label, word) -> int | None:
        """Position of word in label's form list, or None."""
        try:
            return self.forms[label].index(word)
        except ValueError:
            return None


def build_morph_table(labels, overrides: dict | None = None) -> MorphTable:
    """Base + rule plural per label, with irregular overrides winning."""
    table = {}
    merged = dict(IRREGULAR_PLURALS)
    if overrides:
        merged.update({k: tuple(v) for k, v in overrides.items()})
    for label in labels:
        if label in merged:
            table[label] = merged[label]
        else:
            table[label] = (label, pluralize(label))
    return MorphTable(table)


def save_morph_table(path, table: MorphTable) -> None:
    doc = {"forms": {k: list(v) for k, v in sorted(table.forms.items())}}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_morph_table(path) -> MorphTable:
    doc = json.loads(Path(path).read_text())
    return MorphTable({k: tuple(v) for k, v in doc["forms"].items()})
