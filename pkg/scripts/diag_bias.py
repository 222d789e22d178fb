"""Decode-time copy bias diagnostic: where do the marginal copies land?

Decodes the cached seed-0 CE model on the validation splits at several bias
values and decomposes the CIDEr-D delta per image: how many extra copies the
bias buys, whether those copies are gold (reference-mentioned), and what the
caption length drift costs. Scratch tool for corpus/recipe tuning.
"""

import time
import warnings
from pathlib import Path

from copycap.captioner import load_checkpoint, save_checkpoint
from copycap.decoder import DecodeConfig, greedy_decode
from copycap.experiments import DeskProfile, Experiment, desk_corpus
from copycap.metrics import cider_d
from copycap.vocab import surface

warnings.simplefilter("ignore")
CACHE = Path("/tmp/copycap-cache")
CACHE.mkdir(exist_ok=True)

t0 = time.time()
profile = DeskProfile()
corpus = desk_corpus(profile)
exp = Experiment(corpus, profile)

path = CACHE / "ce0.npz"
if path.exists():
    ce = load_checkpoint(path)
else:
    ce = exp.ce_model(seed=0)[0]
    save_checkpoint(path, ce)
    print(f"[{time.time() - t0:.0f}s] trained ce0")

data = exp.data_for(ce)

for split in ("val_in", "val_out"):
    eval_images = data.eval_sets[split]
    base = {}
    for e in eval_images:
        ev = greedy_decode(ce, e.inputs, DecodeConfig(beam_size=1, ib=1.0))
        cap = surface(ev)
        refs = [list(r) for r in e.refs]
        base[e.image_id] = (
            ev,
            cap,
            cider_d(cap, refs, data.stats),
            {x.word for x in ev if x.is_copy},
        )
    print(f"\n=== {split}: base cider={sum(v[2] for v in base.values())/len(base):.3f}")
    for b_tag, b in (("e", 2.718281828), ("e2", 7.389056099)):
        rows = []
        for e in eval_images:
            ev = greedy_decode(ce, e.inputs, DecodeConfig(beam_size=1, ib=b))
            cap = surface(ev)
            refs = [list(r) for r in e.refs]
            score = cider_d(cap, refs, data.stats)
            rows.append((e, ev, cap, score))
        total = sum(r[3] for r in rows) / len(rows)
        gained = [r for r in rows if r[3] > base[r[0].image_id][2] + 1e-9]
        lost = [r for r in rows if r[3] < base[r[0].image_id][2] - 1e-9]
        new_gold = new_nongold = 0
        len_drift = 0.0
        changed = 0
        for e, ev, cap, score in rows:
            b_ev, b_cap, b_score, b_copies = base[e.image_id]
            copies = {x.word for x in ev if x.is_copy}
            ref_words = {w for r in e.refs for w in r}
            for w in copies - b_copies:
                if w in ref_words:
                    new_gold += 1
                else:
                    new_nongold += 1
            len_drift += len(cap) - len(b_cap)
            changed += cap != b_cap
        print(
            f"  b={b_tag}: cider={total:.3f}  changed={changed}/{len(rows)}"
            f"  up={len(gained)} down={len(lost)}"
            f"  new copies gold={new_gold} nongold={new_nongold}"
            f"  len drift={len_drift/len(rows):+.2f}"
        )
        worst = sorted(rows, key=lambda r: r[3] - base[r[0].image_id][2])[:5]
        for e, ev, cap, score in worst:
            b_ev, b_cap, b_score, _ = base[e.image_id]
            print(f"    {b_score:.2f}->{score:.2f}  was={' '.join(b_cap)!r}")
            print(f"      now={' '.join(cap)!r}  refs[0]={' '.join(e.refs[0])!r}")

print(f"\ntotal {time.time() - t0:.0f}s")
