"""Error decomposition for the copy ladder: where does val-out F1 leak?

Trains (or reloads) seed-0 CE and R_p+VOA models, then breaks object F1
into false positives and false negatives per label category and prints
decoded examples against gold. Scratch tool for corpus/recipe tuning.
"""

import sys
import time
import warnings
from pathlib import Path

from copycap.captioner import load_checkpoint, save_checkpoint
from copycap.decoder import DecodeConfig, greedy_decode
from copycap.experiments import DeskProfile, Experiment, desk_corpus
from copycap.trainer import RewardConfig, form_selection_accuracy
from copycap.vocab import surface

warnings.simplefilter("ignore")
CACHE = Path("/tmp/copycap-cache")
CACHE.mkdir(exist_ok=True)

t0 = time.time()
profile = DeskProfile()
corpus = desk_corpus(profile)
exp = Experiment(corpus, profile)


def cached(name, build):
    path = CACHE / f"{name}.npz"
    if path.exists():
        return load_checkpoint(path)
    model = build()
    save_checkpoint(path, model)
    print(f"[{time.time() - t0:.0f}s] trained {name}")
    return model


ce = cached("ce0", lambda: exp.ce_model(seed=0)[0])
rpv = cached(
    "rpv0",
    lambda: exp.scst_model(
        seed=0, reward=RewardConfig(kind="proportional", p=0.3, voa_only=True)
    )[0],
)

data = exp.data_for(ce)
eval_images = data.eval_sets["val_out"]

for tag, model in (("ce", ce), ("r_p+voa", rpv)):
    cfg = DecodeConfig(beam_size=1, max_len=model.config.max_len)
    tp = fp = fn = 0
    fp_by_kind = {}
    fn_multi = 0  # missed gold on images with 2+ gold labels
    n_eos_short = 0
    examples = []
    for e in eval_images:
        events = greedy_decode(model, e.inputs, cfg)
        words = set(surface(events))
        layout = model.layout_for(e.inputs)
        mentioned = {
            label
            for label in data.label_universe
            if any(f in words for f in corpus.morph.forms_of(label))
        }
        gold = set(e.gold)
        tp += len(mentioned & gold)
        fp += len(mentioned - gold)
        fn += len(gold - mentioned)
        for label in mentioned - gold:
            kind = (
                "ancestor"
                if label in corpus.taxonomy.internal_nodes()
                else "undetected" if label not in layout.labels else "detected-nongold"
            )
            fp_by_kind[kind] = fp_by_kind.get(kind, 0) + 1
        if len(gold) >= 2 and gold - mentioned:
            fn_multi += len(gold - mentioned)
        if len(events) <= 5:
            n_eos_short += 1
        if len(examples) < 8:
            examples.append(
                f"  gold={sorted(gold)!s:<30} got={' '.join(surface(events))!r}"
            )
    f1 = 2 * tp / (2 * tp + fp + fn)
    print(f"\n=== {tag}: val_out F1={f1:.3f}  tp={tp} fp={fp} fn={fn}")
    print(f"  fp kinds: {fp_by_kind}   fn on multi-gold images: {fn_multi}")
    print(f"  captions <=5 tokens: {n_eos_short}/{len(eval_images)}")
    print("\n".join(examples))

overall, plural = form_selection_accuracy(ce, data.ce_pairs)
print(f"\nselector-level accuracy (ce): overall={overall:.4f} plural={plural:.4f}")
print(f"total {time.time() - t0:.0f}s")
