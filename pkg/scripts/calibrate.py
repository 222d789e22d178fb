"""One-seed dry run of the ablation ladder; prints margin lines for tuning.

Runs the desk profile on seed 0 and reports the metric gaps the release
gate cares about: copy-rate ordering, object-F1 separation, caption-quality
parity, abstract-label transfer, selector accuracy, and the decode-time
copy-bias sweep. Slow (tens of minutes); not a test.
"""

import math
import time
import warnings

from copycap.experiments import DeskProfile, Experiment, desk_corpus
from copycap.trainer import RewardConfig, form_selection_accuracy

t0 = time.time()
warnings.simplefilter("ignore")

profile = DeskProfile()
corpus = desk_corpus(profile)
exp = Experiment(corpus, profile)

R_P_VOA = RewardConfig(kind="proportional", p=0.3, voa_only=True)
R_P = RewardConfig(kind="proportional", p=0.3)
R_A_VOA = RewardConfig(kind="additive", a=0.3, voa_only=True)
CIDER = RewardConfig(kind="cider")


def show(tag, metrics):
    for split, m in metrics.items():
        print(
            f"{tag:14s} {split:8s} cider={m['cider']:.3f} f1={m['object_f1']:.3f} "
            f"ocid={m['object_cider']:.3f} aveo={m['avg_objects']:.3f}",
            flush=True,
        )


def stamp(label):
    print(f"--- {label} @ {time.time() - t0:.0f}s", flush=True)


stamp("ce")
ce_model, _ = exp.ce_model(seed=0)
ce = exp.eval_model(ce_model)
show("ce", ce)

stamp("cider")
cid_model, _ = exp.scst_model(seed=0, reward=CIDER)
cid = exp.eval_model(cid_model)
show("cider", cid)

stamp("r_p")
rp_model, _ = exp.scst_model(seed=0, reward=R_P)
rp = exp.eval_model(rp_model)
show("r_p", rp)

stamp("r_p+voa")
rpv_model, _ = exp.scst_model(seed=0, reward=R_P_VOA)
rpv = exp.eval_model(rpv_model)
show("r_p+voa", rpv)

stamp("r_a+voa")
rav_model, _ = exp.scst_model(seed=0, reward=R_A_VOA)
rav = exp.eval_model(rav_model)
show("r_a+voa", rav)

stamp("r_p+voa noAL")
noal_model, _ = exp.scst_model(seed=0, reward=R_P_VOA, use_abstract=False)
noal = exp.eval_model(noal_model)
show("r_p+voa-noAL", noal)

stamp("ce noM")
nom_model, _ = exp.ce_model(seed=0, use_morph=False)

print()
print("=== separation margins (seed 0) ===")
for split in ("val_in", "val_out"):
    print(
        f"copy rate {split}: aveo ce={ce[split]['avg_objects']:.3f} "
        f"cider={cid[split]['avg_objects']:.3f} r_p={rp[split]['avg_objects']:.3f} "
        f"(want ce < cider <= r_p)"
    )
    print(
        f"object f1 {split}: r_p+voa-ce={rpv[split]['object_f1'] - ce[split]['object_f1']:+.3f} "
        f"(want >=0.15) r_p+voa-cider={rpv[split]['object_f1'] - cid[split]['object_f1']:+.3f} (want >=0.05)"
    )
    print(
        f"quality   {split}: cider r_p+voa={rpv[split]['cider']:.3f} vs 0.98*r_a+voa="
        f"{0.98 * rav[split]['cider']:.3f} (want >=)"
    )
    print(
        f"transfer  {split}: f1 noAL-delta={noal[split]['object_f1'] - rpv[split]['object_f1']:+.3f} "
        f"(want negative on val_out)"
    )

data = exp.data_for(ce_model)
acc = form_selection_accuracy(ce_model, data.ce_pairs)
nom_data = exp.data_for(nom_model)
nom_acc = form_selection_accuracy(nom_model, nom_data.ce_pairs)
print(f"selector acc (overall, plural): withM={acc} noM={nom_acc} "
      f"(want plural>=0.90 and withM>noM)")

print("copy-bias sweep:")
for b in (1.0, math.e, math.e**2, math.e**3):
    ce_b = exp.eval_model(ce_model, ib=b)
    rpv_b = exp.eval_model(rpv_model, ib=b)
    print(
        f"   b=e^{math.log(b):.0f}: ce val_in cider={ce_b['val_in']['cider']:.3f} "
        f"val_out cider={ce_b['val_out']['cider']:.3f} aveo={ce_b['val_out']['avg_objects']:.3f} | "
        f"r_p+voa val_in cider={rpv_b['val_in']['cider']:.3f} "
        f"val_out cider={rpv_b['val_out']['cider']:.3f} aveo={rpv_b['val_out']['avg_objects']:.3f}"
    )

print(f"total wall time: {time.time() - t0:.0f}s")
