"""Surface-form table rules and the token-event/vocabulary layer."""

import pytest

from copycap.morph import MorphTable, build_morph_table, load_morph_table, pluralize, save_morph_table
from copycap.vocab import BOS, EOS, TokenEvent, Vocabulary, copy_event, surface, tokenize, vocab_event


class TestPluralRules:
    def test_default_s(self):
        assert pluralize("hamburger") == "hamburgers"
        assert pluralize("dog") == "dogs"

    def test_sibilant_es(self):
        assert pluralize("bus") == "buses"
        assert pluralize("box") == "boxes"
        assert pluralize("bench") == "benches"
        assert pluralize("brush") == "brushes"

    def test_consonant_y_to_ies(self):
        assert pluralize("pony") == "ponies"
        assert pluralize("cherry") == "cherries"

    def test_vowel_y_keeps_s(self):
        assert pluralize("monkey") == "monkeys"


class TestBuildMorphTable:
    def test_regular_label(self):
        table = build_morph_table(["hamburger"])
        assert table.forms_of("hamburger") == ("hamburger", "hamburgers")

    def test_irregular_single_form(self):
        table = build_morph_table(["deer"])
        assert table.forms_of("deer") == ("deer",)
        assert table.num_forms("deer") == 1

    def test_irregular_plural(self):
        table = build_morph_table(["person"])
        assert table.forms_of("person") == ("person", "people")

    def test_override_wins(self):
        table = build_morph_table(["octopus"], overrides={"octopus": ["octopus", "octopi"]})
        assert table.forms_of("octopus") == ("octopus", "octopi")

    def test_form_index(self):
        table = build_morph_table(["bus"])
        assert table.form_index("bus", "bus") == 0
        assert table.form_index("bus", "buses") == 1
        assert table.form_index("bus", "cars") is None

    def test_duplicate_forms_rejected(self):
        with pytest.raises(ValueError):
            MorphTable({"x": ("same", "same")})

    def test_empty_forms_rejected(self):
        with pytest.raises(ValueError):
            MorphTable({"x": ()})

    def test_round_trip(self, tmp_path):
        table = build_morph_table(["dog", "bus", "deer"])
        path = tmp_path / "morph.json"
        save_morph_table(path, table)
        assert load_morph_table(path).forms == table.forms


class TestTokenEvents:
    def test_vocab_event_rejects_copy_fields(self):
        with pytest.raises(ValueError):
            TokenEvent("vocab", "dog", obj_index=1, form=0)

    def test_copy_event_requires_indices(self):
        with pytest.raises(ValueError):
            TokenEvent("copy", "dog")

    def test_surface_strips_sentinels(self):
        events = [vocab_event(BOS), vocab_event("a"), copy_event(0, 1, "dogs"), vocab_event(EOS)]
        assert surface(events) == ["a", "dogs"]

    def test_events_hashable_for_ngram_use(self):
        assert len({copy_event(0, 0, "dog"), copy_event(0, 0, "dog")}) == 1


class TestVocabulary:
    def test_reserved_sentinels(self):
        v = Vocabulary.build([["a", "dog"]], extra_words=["dogs"])
        assert v.word_of(0) == BOS and v.word_of(1) == EOS
        assert v.id_of(BOS) == 0 and v.id_of(EOS) == 1

    def test_closed_vocabulary_rejects_unknown(self):
        v = Vocabulary.build([["a"]])
        with pytest.raises(KeyError):
            v.id_of("zebra")

    def test_label_forms_registered(self):
        v = Vocabulary.build([["a", "red", "dog"]], extra_words=["dog", "dogs"])
        assert "dogs" in v and "dog" in v

    def test_deterministic_order(self):
        a = Vocabulary.build([["b", "a"], ["c"]])
        b = Vocabulary.build([["c"], ["a", "b"]])
        assert a.words == b.words

    def test_tokenize_lowercases(self):
        assert tokenize("A Red Dog") == ["a", "red", "dog"]
