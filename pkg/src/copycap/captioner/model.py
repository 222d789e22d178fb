"""Copy-augmented transformer captioner.

Object representations feed a post-LN transformer encoder; a causal
decoder over frozen word/positional embeddings produces states h_t; the
output head scores every vocabulary word (W_e h_t) against every copyable
object (w_c tanh(W_f H_i + W_h h_t)), normalizes them in one joint
softmax, and refines each object's probability over its surface forms
with a per-label selector softmax(W_l h_t). Everything runs on the
numcore tape so one code path serves training and decoding.
"""

from __future__ import annotations

import numpy as np

from .. import numcore as nc
from ..morph import MorphTable
from ..vocab import BOS, Vocabulary
from .config import ModelConfig
from .inputs import ObjectInputs
from .layout import DistributionLayout, OutputDistribution


def _fan_in_init(rng, rows: int, cols: int) -> nc.Tensor:
    return nc.Tensor(rng.standard_normal((rows, cols)) / np.sqrt(rows), requires_grad=True)


class CaptionModel:
    """Parameters plus the forward passes; exclusive ownership when training."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        morph: MorphTable,
        abstract_labels: tuple,
        seed: int = 0,
        use_abstract: bool = True,
        use_morph: bool = True,
    ):
        self.config = config
        self.vocab = vocab
        self.morph = morph
        self.abstract_labels = tuple(abstract_labels)
        self.use_abstract = use_abstract
        self.use_morph = use_morph
        self.seed = seed
        d, v = config.d, len(vocab)

        frozen_rng = np.random.default_rng(config.embed_seed)
        self.params = {
            "word_emb": nc.Tensor(frozen_rng.standard_normal((v, d)) / np.sqrt(d)),
            "pos_emb": nc.Tensor(frozen_rng.standard_normal((config.max_len, d)) / np.sqrt(d)),
        }

        rng = np.random.default_rng(seed)
        p = self.params
        p["w_r"] = _fan_in_init(rng, config.d_roi, d)
        p["w_p"] = _fan_in_init(rng, 8, d)
        p["abstract_emb"] = nc.Tensor(
            rng.standard_normal((len(self.abstract_labels), d)) / np.sqrt(d), requires_grad=True
        )
        self._add_ln(rng, "obj_roi")
        self._add_ln(rng, "obj_pos")
        for i in range(config.n_enc):
            self._add_attention(rng, f"enc{i}_att")
            self._add_ln(rng, f"enc{i}_ln1")
            self._add_ffn(rng, f"enc{i}")
            self._add_ln(rng, f"enc{i}_ln2")
        for i in range(config.n_dec):
            self._add_attention(rng, f"dec{i}_self")
            self._add_ln(rng, f"dec{i}_ln1")
            self._add_attention(rng, f"dec{i}_cross")
            self._add_ln(rng, f"dec{i}_ln2")
            self._add_ffn(rng, f"dec{i}")
            self._add_ln(rng, f"dec{i}_ln3")
        p["w_e"] = _fan_in_init(rng, d, v)
        p["w_f"] = _fan_in_init(rng, d, d)
        p["w_h"] = _fan_in_init(rng, d, d)
        p["w_c"] = _fan_in_init(rng, d, 1)
        if use_morph:
            for label in morph.labels():
                p[f"morph:{label}"] = _fan_in_init(rng, d, morph.num_forms(label))

    def _add_attention(self, rng, prefix: str) -> None:
        d = self.config.d
        for name in ("wq", "wk", "wv", "wo"):
            self.params[f"{prefix}_{name}"] = _fan_in_init(rng, d, d)

    def _add_ffn(self, rng, prefix: str) -> None:
        d, f = self.config.d, self.config.ffn
        p = self.params
        p[f"{prefix}_ffn_w1"] = _fan_in_init(rng, d, f)
        p[f"{prefix}_ffn_b1"] = nc.Tensor(np.zeros(f), requires_grad=True)
        p[f"{prefix}_ffn_w2"] = _fan_in_init(rng, f, d)
        p[f"{prefix}_ffn_b2"] = nc.Tensor(np.zeros(d), requires_grad=True)

    def _add_ln(self, rng, prefix: str) -> None:
        d = self.config.d
        self.params[f"{prefix}_gain"] = nc.Tensor(np.ones(d), requires_grad=True)
        self.params[f"{prefix}_shift"] = nc.Tensor(np.zeros(d), requires_grad=True)

    def trainable(self) -> list:
        return [t for t in self.params.values() if t.requires_grad]

    def named_trainable(self) -> list:
        return [(n, t) for n, t in self.params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def _attention(self, x_q, x_kv, prefix: str, mask=None):
        p, cfg = self.params, self.config
        q = nc.matmul(x_q, p[f"{prefix}_wq"])
        k = nc.matmul(x_kv, p[f"{prefix}_wk"])
        v = nc.matmul(x_kv, p[f"{prefix}_wv"])
        dk = cfg.d_head
        heads = []
        for h in range(cfg.heads):
            lo, hi = h * dk, (h + 1) * dk
            att = nc.softmax(
                nc.scale(
                    nc.matmul(nc.slice_cols(q, lo, hi), nc.transpose(nc.slice_cols(k, lo, hi))),
                    dk ** -0.5,
                ),
                mask=mask,
            )
            heads.append(nc.matmul(att, nc.slice_cols(v, lo, hi)))
        return nc.matmul(nc.concat(heads, axis=1), p[f"{prefix}_wo"])

    def _ffn(self, x, prefix: str):
        p = self.params
        hidden = nc.tanh(nc.add(nc.matmul(x, p[f"{prefix}_ffn_w1"]), p[f"{prefix}_ffn_b1"]))
        return nc.add(nc.matmul(hidden, p[f"{prefix}_ffn_w2"]), p[f"{prefix}_ffn_b2"])

    def _residual_ln(self, x, sub, ln_prefix: str, train: bool, rng):
        if train and self.config.dropout > 0.0:
            sub = nc.dropout(sub, self.config.dropout, train, rng)
        p = self.params
        return nc.layer_norm(nc.add(x, sub), p[f"{ln_prefix}_gain"], p[f"{ln_prefix}_shift"])

    def object_representation(self, inputs: ObjectInputs):
        """x_i = LN(W_r r_i + e_i) + LN(W_p p_i); visual objects use e = 0."""
        p = self.params
        proj = nc.matmul(nc.Tensor(inputs.rois()), p["w_r"])
        if inputs.k_f and self.use_abstract:
            e_f = nc.embedding_gather(p["abstract_emb"], list(inputs.abstract_ids))
            zeros = nc.Tensor(np.zeros((inputs.k_g, self.config.d)))
            proj = nc.add(proj, nc.concat([e_f, zeros], axis=0))
        roi_part = nc.layer_norm(proj, p["obj_roi_gain"], p["obj_roi_shift"])
        pos_part = nc.layer_norm(
            nc.matmul(nc.Tensor(inputs.positions()), p["w_p"]),
            p["obj_pos_gain"],
            p["obj_pos_shift"],
        )
        return nc.add(roi_part, pos_part)

    def encode(self, inputs: ObjectInputs, train: bool = False, rng=None):
        """Returns (H over all objects, H_f over the copyable prefix or None)."""
        x = self.object_representation(inputs)
        for i in range(self.config.n_enc):
            x = self._residual_ln(x, self._attention(x, x, f"enc{i}_att"), f"enc{i}_ln1", train, rng)
            x = self._residual_ln(x, self._ffn(x, f"enc{i}"), f"enc{i}_ln2", train, rng)
        if inputs.k_f == 0:
            return x, None
        take = np.zeros((inputs.k_f, inputs.k_f + inputs.k_g))
        take[np.arange(inputs.k_f), np.arange(inputs.k_f)] = 1.0
        return x, nc.matmul(nc.Tensor(take), x)

    def input_ids(self, history) -> list:
        """BOS followed by each event's surface word, as embedding rows."""
        return [self.vocab.id_of(BOS)] + [self.vocab.id_of(e.word) for e in history]

    def embed_token(self, event) -> nc.Tensor:
        return nc.embedding_gather(self.params["word_emb"], [self.vocab.id_of(event.word)])

    def decode_states(self, H, token_ids, train: bool = False, rng=None):
        """Causal decoder states, one row per input position."""
        t = len(token_ids)
        if t > self.config.max_len:
            raise ValueError(f"history length {t} exceeds max_len {self.config.max_len}")
        p = self.params
        tok = nc.embedding_gather(p["word_emb"], list(token_ids))
        pos = nc.embedding_gather(p["pos_emb"], np.arange(t))
        x = nc.add(tok, pos)
        causal = np.tril(np.ones((t, t), dtype=bool))
        for i in range(self.config.n_dec):
            x = self._residual_ln(
                x, self._attention(x, x, f"dec{i}_self", mask=causal), f"dec{i}_ln1", train, rng
            )
            x = self._residual_ln(
                x, self._attention(x, H, f"dec{i}_cross"), f"dec{i}_ln2", train, rng
            )
            x = self._residual_ln(x, self._ffn(x, f"dec{i}"), f"dec{i}_ln3", train, rng)
        return x

    def layout_for(self, inputs: ObjectInputs) -> DistributionLayout:
        forms = inputs.forms if self.use_morph else tuple((f[0],) for f in inputs.forms)
        return DistributionLayout(self.vocab, inputs.labels, forms)

    def sequence_distributions(self, h, h_f, layout: DistributionLayout, vocab_mask=None):
        """Per-step joint probabilities, one row per decoder state.

        vocab_mask is a boolean vector over vocabulary columns (False =
        excluded); it is applied inside the joint softmax, which equals
        zeroing those entries of the final distribution and renormalizing.
        """
        p = self.params
        k_f = layout.k_f
        vscore = nc.matmul(h, p["w_e"])
        if k_f:
            a = nc.matmul(h_f, p["w_f"])
            b = nc.matmul(h, p["w_h"])
            copy_scores = []
            for i in range(k_f):
                sel = np.zeros((1, k_f))
                sel[0, i] = 1.0
                row = nc.matmul(nc.Tensor(sel), a)
                copy_scores.append(nc.matmul(nc.tanh(nc.add(b, row)), p["w_c"]))
            scores = nc.concat([vscore] + copy_scores, axis=1)
        else:
            scores = vscore
        mask = None
        if vocab_mask is not None:
            mask = np.concatenate([np.asarray(vocab_mask, dtype=bool), np.ones(k_f, dtype=bool)])
        joint = nc.softmax(scores, mask=mask)
        if k_f == 0:
            return joint
        v = layout.vocab_size
        parts = [nc.slice_cols(joint, 0, v)]
        for i in range(k_f):
            c_col = nc.slice_cols(joint, v + i, v + i + 1)
            s_i = len(layout.forms[i])
            if s_i == 1:
                parts.append(c_col)
                continue
            form_probs = nc.softmax(nc.matmul(h, p[f"morph:{layout.labels[i]}"]))
            parts.append(nc.multiply(nc.concat([c_col] * s_i, axis=1), form_probs))
        return nc.concat(parts, axis=1)

    def teacher_forced(self, inputs: ObjectInputs, events, vocab_mask=None, train=False, rng=None):
        """Distributions for every step of a target caption (graph-recorded)."""
        H, h_f = self.encode(inputs, train, rng)
        layout = self.layout_for(inputs)
        ids = self.input_ids(events[:-1]) if events else self.input_ids([])
        h = self.decode_states(H, ids, train, rng)
        return self.sequence_distributions(h, h_f, layout, vocab_mask), layout


class CaptionSession:
    """Decoding context for one image over immutable parameters."""

    def __init__(self, model: CaptionModel, inputs: ObjectInputs):
        self.model = model
        self.inputs = inputs
        with nc.no_grad():
            self.H, self.H_f = model.encode(inputs)
        self.layout = model.layout_for(inputs)

    def distribution(self, history, vocab_mask=None) -> OutputDistribution:
        """Next-token distribution given the emitted TokenEvents so far."""
        with nc.no_grad():
            h = self.model.decode_states(self.H, self.model.input_ids(history))
            dists = self.model.sequence_distributions(h, self.H_f, self.layout, vocab_mask)
        return OutputDistribution(dists.data[-1], self.layout)

    @property
    def max_new_tokens(self) -> int:
        # BOS occupies one decoder slot
        return self.model.config.max_len - 1
