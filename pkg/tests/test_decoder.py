"""Decoder checks: copy bias arithmetic, penalties, exhaustive beam oracle."""

import math

import numpy as np
import pytest

from copycap import decoder as dec
from copycap.captioner import CaptionModel, CaptionSession, ModelConfig, ObjectInputs
from copycap.captioner.layout import DistributionLayout, OutputDistribution
from copycap.morph import MorphTable
from copycap.taxonomy import COPYABLE, VISUAL, DetectedObject
from copycap.vocab import BOS, EOS, Vocabulary, copy_event, vocab_event

TINY = ModelConfig(d=8, n_enc=1, n_dec=1, ffn=16, heads=2, dropout=0.0, d_roi=5, max_len=10)


def make_model(words, morph_forms, seed=0, max_len=10):
    cfg = ModelConfig(**{**TINY.__dict__, "max_len": max_len})
    vocab = Vocabulary.build([words], extra_words=[f for fs in morph_forms.values() for f in fs])
    return CaptionModel(cfg, vocab, MorphTable(morph_forms), ("entity",), seed=seed)


def make_inputs(labels, morph, rng, d_roi=5):
    def det(label, source):
        x1, y1 = rng.uniform(0, 0.4, 2)
        return DetectedObject(
            label,
            (float(x1), float(y1), float(x1 + 0.3), float(y1 + 0.3)),
            float(rng.uniform(0.5, 1.0)),
            rng.standard_normal(d_roi),
            source,
        )

    return ObjectInputs(
        F=[det(l, COPYABLE) for l in labels],
        G=[det("ctx", VISUAL)],
        labels=tuple(labels),
        forms=tuple(morph.forms_of(l) for l in labels),
        abstract_ids=tuple(0 for _ in labels),
    )


def flat_layout():
    vocab = Vocabulary.build([["a", "red", "dog", "dogs", "sits"]])
    return DistributionLayout(vocab, ("dog",), (("dog", "dogs"),))


def flat_dist(copy_mass=0.2):
    layout = flat_layout()
    probs = np.empty(layout.width)
    v = layout.vocab_size
    probs[:v] = (1.0 - copy_mass) / v
    probs[v:] = copy_mass / (layout.width - v)
    return OutputDistribution(probs, layout)


class TestInferenceBias:
    def test_hand_value_at_e_squared(self):
        dist = flat_dist(copy_mass=0.2)
        out = dec.apply_inference_bias(dist, math.exp(2.0))
        expected = 0.2 * math.exp(2.0) / (0.8 + 0.2 * math.exp(2.0))
        assert out.copy_mass() == pytest.approx(expected, abs=1e-12)
        assert out.copy_mass() == pytest.approx(0.6487, abs=1e-4)

    def test_identity_at_one(self):
        dist = flat_dist()
        assert dec.apply_inference_bias(dist, 1.0) is dist

    def test_rejects_nonpositive_bias(self):
        for b in (0.0, -1.0):
            with pytest.raises(ValueError):
                dec.apply_inference_bias(flat_dist(), b)

    def test_grid_monotonically_increases_copy_mass(self):
        dist = flat_dist(copy_mass=0.15)
        masses = [dec.apply_inference_bias(dist, b).copy_mass() for b in (1.0, math.e, math.e**2, math.e**3)]
        assert all(m2 > m1 for m1, m2 in zip(masses, masses[1:]))

    def test_large_bias_limit_is_all_copy(self):
        out = dec.apply_inference_bias(flat_dist(copy_mass=0.01), 1e12)
        assert out.copy_mass() == pytest.approx(1.0, abs=1e-9)

    def test_preserves_ranking_within_groups(self):
        rng = np.random.default_rng(0)
        layout = flat_layout()
        for _ in range(50):
            raw = rng.random(layout.width) + 1e-3
            dist = OutputDistribution(raw / raw.sum(), layout)
            out = dec.apply_inference_bias(dist, float(rng.uniform(0.1, 20.0)))
            v = layout.vocab_size
            assert list(np.argsort(out.probs[:v])) == list(np.argsort(dist.probs[:v]))
            assert list(np.argsort(out.probs[v:])) == list(np.argsort(dist.probs[v:]))
            assert out.probs.sum() == pytest.approx(1.0, abs=1e-12)


class TestBigramPenalty:
    HISTORY = [vocab_event("a"), vocab_event("dog"), vocab_event("a")]

    def test_repeat_is_amplified(self):
        assert dec.bigram_penalty(-1.0, "dog", self.HISTORY) == pytest.approx(-math.exp(2.0), abs=1e-12)

    def test_fresh_bigram_unchanged(self):
        assert dec.bigram_penalty(-1.0, "sits", self.HISTORY) == -1.0

    def test_empty_and_single_history_unchanged(self):
        assert dec.bigram_penalty(-2.5, "dog", []) == -2.5
        assert dec.bigram_penalty(-2.5, "dog", [vocab_event("a")]) == -2.5

    def test_strictly_less_attractive_for_negative_logprobs(self):
        for lp in (-0.01, -1.0, -5.0, -30.0):
            assert dec.bigram_penalty(lp, "dog", self.HISTORY) < lp

    def test_literal_division_makes_repeats_more_attractive(self):
        out = dec.bigram_penalty(-1.0, "dog", self.HISTORY, literal=True)
        assert out == pytest.approx(-1.0 / math.exp(2.0), abs=1e-12)
        assert out > -1.0

    def test_copy_events_count_by_surface_word(self):
        history = [vocab_event("a"), copy_event(0, 0, "dog"), vocab_event("a")]
        assert dec.bigram_penalty(-1.0, copy_event(1, 0, "dog"), history) == pytest.approx(
            -math.exp(2.0)
        )


def independent_rank(model, inputs, cfg):
    """Exhaustive enumeration of every terminal hypothesis, scored from scratch."""
    session = CaptionSession(model, inputs)
    layout = session.layout
    steps = min(cfg.max_len - 1, session.max_new_tokens)
    cache = {}

    def probs_for(cols):
        if cols not in cache:
            events = [layout.event_of(c) for c in cols]
            cache[cols] = session.distribution(events).probs
        return cache[cols]

    terminals = []

    def walk(cols, raw, copied):
        depth = len(cols)
        events = [layout.event_of(c) for c in cols]
        if events and events[-1].word == EOS:
            terminals.append((cols, raw, depth))
            return
        if depth == steps:
            terminals.append((cols, raw, math.inf))
            return
        probs = probs_for(cols)
        words = [ev.word for ev in events]
        bigrams = set(zip(words, words[1:]))
        for col in range(layout.width):
            if probs[col] <= 0:
                continue
            ev = layout.event_of(col)
            if cfg.copy_once and ev.is_copy and ev.obj_index in copied:
                continue
            lp = math.log(probs[col])
            if words and (words[-1], ev.word) in bigrams and lp < 0:
                lp *= cfg.bigram_penalty
            walk(
                cols + (col,),
                raw + lp,
                copied | {ev.obj_index} if ev.is_copy else copied,
            )

    walk((), 0.0, frozenset())
    scored = []
    for cols, raw, eos_at in terminals:
        score = raw / len(cols) if cfg.length_normalize else raw
        scored.append((cols, score, eos_at))
    scored.sort(key=lambda t: (-t[1], t[2], t[0]))
    return [([layout.event_of(c) for c in cols], score) for cols, score, _ in scored]


class TestBeamSearch:
    def test_matches_exhaustive_enumeration_vocab_only(self):
        model = make_model(["a", "red", "sits"], {}, seed=1, max_len=4)
        inputs = make_inputs([], MorphTable({}), np.random.default_rng(1))
        cfg = dec.DecodeConfig(beam_size=128, max_len=4)
        expected = independent_rank(model, inputs, cfg)
        got = dec.beam_search(model, inputs, cfg)
        assert len(got) == cfg.beam_size or len(got) == len(expected)
        for (ev_g, s_g), (ev_e, s_e) in zip(got, expected):
            assert ev_g == ev_e
            assert s_g == pytest.approx(s_e, abs=1e-12)

    def test_matches_exhaustive_enumeration_with_copying(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        model = make_model(["a", "red"], {"dog": ("dog", "dogs")}, seed=2, max_len=4)
        inputs = make_inputs(["dog"], morph, np.random.default_rng(2))
        cfg = dec.DecodeConfig(beam_size=600, max_len=4)
        expected = independent_rank(model, inputs, cfg)
        got = dec.beam_search(model, inputs, cfg)
        for (ev_g, s_g), (ev_e, s_e) in zip(got, expected):
            assert ev_g == ev_e
            assert s_g == pytest.approx(s_e, abs=1e-12)

    def test_beam_one_equals_greedy(self):
        morph = MorphTable({"dog": ("dog", "dogs"), "box": ("box", "boxes")})
        for seed in range(8):
            model = make_model(["a", "red", "sits"], morph.forms, seed=seed)
            inputs = make_inputs(["dog", "box"], morph, np.random.default_rng(seed))
            cfg = dec.DecodeConfig(beam_size=1)
            beam = dec.beam_search(model, inputs, cfg)[0][0]
            greedy = dec.greedy_decode(model, inputs, cfg)
            assert beam == greedy

    def test_copy_once_never_repeats_an_object(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        for seed in range(6):
            model = make_model(["a", "red"], morph.forms, seed=seed)
            model.params["w_c"].data[:] = 4.0  # make copying dominate
            model.params["w_e"].data[:] *= 0.1
            inputs = make_inputs(["dog", "dog"], morph, np.random.default_rng(seed))
            for events, _ in dec.beam_search(model, inputs, dec.DecodeConfig(beam_size=4)):
                seen = [ev.obj_index for ev in events if ev.is_copy]
                assert len(seen) == len(set(seen))

    def test_copy_once_off_allows_repeats(self):
        morph = MorphTable({"dog": ("dog",)})
        model = make_model(["a"], morph.forms, seed=3, max_len=4)
        inputs = make_inputs(["dog"], morph, np.random.default_rng(3))
        cfg = dec.DecodeConfig(beam_size=600, max_len=4, copy_once=False)
        expected = independent_rank(model, inputs, cfg)
        got = dec.beam_search(model, inputs, cfg)
        for (ev_g, s_g), (ev_e, s_e) in zip(got, expected):
            assert ev_g == ev_e
            assert s_g == pytest.approx(s_e, abs=1e-12)
        repeats = [
            ev_list
            for ev_list, _ in got
            if len([e.obj_index for e in ev_list if e.is_copy])
            > len({e.obj_index for e in ev_list if e.is_copy})
        ]
        assert repeats  # the universe includes double-copy paths once the guard is off

    def test_deterministic(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        model = make_model(["a", "red", "sits"], morph.forms, seed=4)
        inputs = make_inputs(["dog"], morph, np.random.default_rng(4))
        cfg = dec.DecodeConfig()
        first = dec.beam_search(model, inputs, cfg)
        second = dec.beam_search(model, inputs, cfg)
        assert first == second

    def test_unbiased_greedy_identical_to_bias_one(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        model = make_model(["a", "red", "sits"], morph.forms, seed=5)
        inputs = make_inputs(["dog"], morph, np.random.default_rng(5))
        a = dec.greedy_decode(model, inputs, dec.DecodeConfig(beam_size=1, ib=1.0))
        b = dec.greedy_decode(model, inputs, dec.DecodeConfig(beam_size=1))
        assert a == b

    def test_length_cap_respected(self):
        morph = MorphTable({})
        model = make_model(["a", "red", "sits"], {}, seed=6, max_len=6)
        inputs = make_inputs([], morph, np.random.default_rng(6))
        for events, _ in dec.beam_search(model, inputs, dec.DecodeConfig(beam_size=3, max_len=6)):
            assert len(events) <= 5

    def test_bias_shifts_greedy_toward_copying(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        hits = 0
        for seed in range(12):
            model = make_model(["a", "red", "sits"], morph.forms, seed=seed)
            inputs = make_inputs(["dog"], morph, np.random.default_rng(seed))
            plain = dec.greedy_decode(model, inputs, dec.DecodeConfig(beam_size=1))
            biased = dec.greedy_decode(model, inputs, dec.DecodeConfig(beam_size=1, ib=math.e**3))
            n_plain = sum(ev.is_copy for ev in plain)
            n_biased = sum(ev.is_copy for ev in biased)
            assert n_biased >= n_plain
            hits += n_biased > n_plain
        assert hits > 0  # the bias must actually change behaviour somewhere


class TestConfigValidation:
    def test_rejects_bad_fields(self):
        with pytest.raises(ValueError):
            dec.DecodeConfig(beam_size=0)
        with pytest.raises(ValueError):
            dec.DecodeConfig(ib=0.0)
        with pytest.raises(ValueError):
            dec.DecodeConfig(max_len=1)
        with pytest.raises(ValueError):
            dec.DecodeConfig(bigram_penalty=-1.0)


class TestSampling:
    def test_multinomial_frequencies_within_three_sigma(self):
        rng = np.random.default_rng(7)
        probs = np.array([0.1, 0.2, 0.3, 0.4])
        n = 50_000
        counts = np.zeros(4)
        for _ in range(n):
            counts[dec.draw_column(rng, probs)] += 1
        for k in range(4):
            sigma = math.sqrt(n * probs[k] * (1 - probs[k]))
            assert abs(counts[k] - n * probs[k]) < 3 * sigma

    def test_deterministic_distribution_draws_the_certain_token(self):
        rng = np.random.default_rng(8)
        probs = np.array([0.0, 1.0, 0.0])
        assert all(dec.draw_column(rng, probs) == 1 for _ in range(20))
        assert math.log(probs[1]) == 0.0

    def test_all_zero_distribution_rejected(self):
        with pytest.raises(ValueError):
            dec.draw_column(np.random.default_rng(9), np.zeros(4))

    def test_path_logprobs_match_independent_recomputation(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        model = make_model(["a", "red", "sits"], morph.forms, seed=10)
        inputs = make_inputs(["dog"], morph, np.random.default_rng(10))
        cfg = dec.DecodeConfig(scst_vocab_mask=True)
        events, logprobs = dec.sample_caption(model, inputs, cfg, np.random.default_rng(11))
        session = CaptionSession(model, inputs)
        mask = dec.scst_vocab_mask(session.layout)
        for t, (ev, lp) in enumerate(zip(events, logprobs)):
            dist = session.distribution(events[:t], vocab_mask=mask)
            col = session.layout.column_of(ev)
            assert lp == pytest.approx(math.log(dist.probs[col]), abs=1e-12)

    def test_vocab_mask_suppresses_copyable_forms(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        model = make_model(["a", "red", "sits"], morph.forms, seed=12)
        inputs = make_inputs(["dog"], morph, np.random.default_rng(12))
        cfg = dec.DecodeConfig(scst_vocab_mask=True)
        forms = {"dog", "dogs"}
        for trial in range(40):
            events, _ = dec.sample_caption(model, inputs, cfg, np.random.default_rng(100 + trial))
            for ev in events:
                if not ev.is_copy:
                    assert ev.word not in forms

    def test_mask_leaves_copy_columns_alive(self):
        morph = MorphTable({"dog": ("dog", "dogs")})
        model = make_model(["a", "red", "sits"], morph.forms, seed=13)
        inputs = make_inputs(["dog"], morph, np.random.default_rng(13))
        session = CaptionSession(model, inputs)
        mask = dec.scst_vocab_mask(session.layout)
        dist = session.distribution([], vocab_mask=mask)
        assert dist.copy_mass() > 0
        for col in session.layout.copyable_vocab_columns():
            assert dist.probs[col] == 0.0

    def test_sampling_without_copyables_needs_no_mask(self):
        model = make_model(["a", "red", "sits"], {}, seed=14)
        inputs = make_inputs([], MorphTable({}), np.random.default_rng(14))
        assert dec.scst_vocab_mask(CaptionSession(model, inputs).layout) is None
        events, logprobs = dec.sample_caption(
            model, inputs, dec.DecodeConfig(scst_vocab_mask=True), np.random.default_rng(15)
        )
        assert len(events) == len(logprobs) >= 1


class TestVectorizedPenaltiesAgreeWithScalar:
    def test_step_logprobs_match_bigram_penalty(self):
        rng = np.random.default_rng(16)
        morph = MorphTable({"dog": ("dog", "dogs")})
        model = make_model(["a", "red", "sits"], morph.forms, seed=16)
        inputs = make_inputs(["dog"], morph, rng)
        session = CaptionSession(model, inputs)
        layout = session.layout
        col_words = [layout.event_of(c).word for c in range(layout.width)]
        for literal in (False, True):
            cfg = dec.DecodeConfig(literal_division=literal)
            hist_cols = [int(rng.integers(layout.width)) for _ in range(4)]
            hyp = dec._Hypothesis()
            for c in hist_cols:
                hyp = hyp.extend(layout.event_of(c), c, -1.0)
            probs = session.distribution(list(hyp.events)).probs
            lps = dec._step_logprobs(probs, hyp, layout, cfg, col_words)
            for col in range(layout.width):
                if probs[col] <= 0:
                    assert lps[col] == -np.inf
                    continue
                ev = layout.event_of(col)
                if cfg.copy_once and ev.is_copy and ev.obj_index in hyp.copied:
                    assert lps[col] == -np.inf
                    continue
                expected = dec.bigram_penalty(
                    math.log(probs[col]), ev, list(hyp.events), literal=literal
                )
                assert lps[col] == pytest.approx(expected, abs=1e-12)


class TestDecodeRecords:
    def test_round_trip(self, tmp_path):
        rec = dec.DecodeRecord(
            image_id="img-7",
            captions=(
                (vocab_event("a"), copy_event(0, 1, "dogs"), vocab_event("sits")),
                (vocab_event("a"),),
            ),
            scores=(-0.5, -1.25),
        )
        path = tmp_path / "decodes.json"
        dec.save_decode_records(path, [rec])
        loaded = dec.load_decode_records(path)
        assert loaded == [rec]
        assert loaded[0].best_surface() == ["a", "dogs", "sits"]

    def test_record_from_ranked_strips_eos(self):
        ranked = [([vocab_event("a"), vocab_event(EOS)], -0.3)]
        rec = dec.record_from_ranked("x", ranked)
        assert rec.captions == ((vocab_event("a"),),)
        assert rec.scores == (-0.3,)

    def test_bad_json_kind_rejected(self):
        with pytest.raises(ValueError):
            dec.event_from_json({"kind": "mystery", "word": "a"})

    def test_bos_never_surfaces(self):
        rec = dec.DecodeRecord("y", ((vocab_event(BOS), vocab_event("a")),), (0.0,))
        assert rec.best_surface() == ["a"]
