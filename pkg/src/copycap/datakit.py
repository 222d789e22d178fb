"""Dataset schema, ingestion, caption dedup, and the synthetic corpus generator.

A dataset is a list of images, each carrying copyable detections (copy
candidates with taxonomy labels), visual-only detections, and reference
caption strings. The generator builds a zero-shot benchmark at desk scale:
a class taxonomy whose leaf labels split into trained and held-out sets,
pseudo-ROI vectors that encode label identity (seeded per-label direction
plus Gaussian noise) so the captioning task is learnable without real
detectors, and templated references that mention each object with a fixed
probability. Held-out labels never occur in training references but share
abstract ancestors with trained labels, so copy behaviour learned on seen
classes can transfer.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .morph import MorphTable, build_morph_table
from .taxonomy import COPYABLE, VISUAL, DetectedObject, Taxonomy, choose_abstract_set
from .vocab import Vocabulary, tokenize

# leaf labels per class: (trained, held out). Held-out labels share the
# class ancestor with trained siblings but never enter training captions.
LABEL_CLASSES = {
    "animal": (("dog", "cat", "horse", "rabbit", "deer", "pony"), ("otter", "badger", "fox")),
    "vehicle": (("car", "truck", "bus", "bicycle", "scooter", "van"), ("tram", "sled", "ferry")),
    "food": (("pizza", "sandwich", "hamburger", "peach", "bagel", "waffle"), ("taco", "muffin", "pretzel")),
    "furniture": (("chair", "table", "bench", "stool", "couch", "dresser"), ("futon", "hammock", "cradle")),
    "clothing": (("hat", "jacket", "scarf", "glove", "boot", "sweater"), ("poncho", "mitten", "sandal")),
    "instrument": (("guitar", "drum", "violin", "trumpet", "banjo", "flute"), ("cello", "oboe", "bugle")),
    "tool": (("hammer", "wrench", "shovel", "ladder", "broom", "rake"), ("chisel", "mallet", "trowel")),
    "plant": (("tree", "bush", "fern", "cactus", "tulip", "daisy"), ("orchid", "willow", "clover")),
}

SCENES = ("park", "street", "kitchen", "room", "field", "shop", "yard", "market", "garden", "harbor")
COLORS = ("red", "blue", "green", "black", "white", "brown")

# caption salience per class: effective mention rate is 1 - (1-q)^s, so
# s=1 reproduces q and q=1 stays certain. Captions favor animate and
# large things; small implements mostly go unmentioned even when detected.
CLASS_SALIENCE = {
    "animal": 1.8,
    "vehicle": 1.5,
    "food": 1.2,
    "furniture": 1.0,
    "clothing": 0.8,
    "instrument": 0.6,
    "plant": 0.45,
    "tool": 0.35,
}
GENERIC_ADJS = ("quiet", "busy", "small", "bright", "empty", "crowded", "sunny", "tidy")
PREPOSITIONS = ("in", "near", "at", "by")
TIME_PHRASES = (("in", "the", "morning"), ("at", "night"), ("on", "a", "gray", "day"))
COUNT_WORDS = {2: "two", 3: "three"}

SPLITS = ("train", "val_in", "val_near", "val_out")


@dataclass
class ImageRecord:
    id: str
    copyable: list
    visual: list
    references: list

    def tokenized_references(self) -> list:
        return [tokenize(c) for c in self.references]


@dataclass
class Dataset:
    split: str
    images: list

    def references(self) -> list:
        return [img.tokenized_references() for img in self.images]

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_train: int = 2000
    n_val_in: int = 150
    n_val_near: int = 150
    n_val_out: int = 200
    refs_per_image: int = 2
    mention_prob: float = 0.30  # q: base chance a reference mentions each object
    class_salience: dict = field(default_factory=lambda: dict(CLASS_SALIENCE))
    generic_prob: float = 0.1  # chance a reference is an object-free scene line
    # evaluation references are object-centric annotations: they name what is
    # in the image far more reliably than the web-style training captions
    val_mention_prob: float = 0.75
    val_generic_prob: float = 0.0
    objects_per_image: tuple = (1, 3)
    visual_per_image: tuple = (1, 2)
    count_probs: tuple = ((1, 0.6), (2, 0.25), (3, 0.15))
    color_prob: float = 0.3
    person_caption_prob: float = 0.15
    person_detection_prob: float = 0.2
    ancestor_box_prob: float = 0.1  # plant an overlapping abstract-label box
    d_roi: int = 32
    roi_noise: float = 0.1
    count_signal: float = 0.5  # weight of the group-size direction in the ROI
    freq_threshold: int = 300  # person exceeds this; genuine labels stay below
    overlap_threshold: float = 0.5
    abstract_k: int = 9
    classes: dict = field(default_factory=lambda: dict(LABEL_CLASSES))
    scenes: tuple = SCENES
    colors: tuple = COLORS

    def trained_labels(self) -> list:
        return [l for tr, _ in self.classes.values() for l in tr]

    def holdout_labels(self) -> list:
        return [l for _, ho in self.classes.values() for l in ho]

    def target_labels(self) -> list:
        """Labels under evaluation: the copy candidates, excluding person."""
        return self.trained_labels() + self.holdout_labels()

    def all_labels(self) -> list:
        return self.target_labels() + ["person"]

    def mention_rate(self, label_class: str, base: float | None = None) -> float:
        q = self.mention_prob if base is None else base
        s = self.class_salience.get(label_class, 1.0)
        return 1.0 - (1.0 - q) ** s


@dataclass
class SyntheticCorpus:
    datasets: dict
    taxonomy: Taxonomy
    morph: MorphTable
    caption_freq: dict
    config: GeneratorConfig


def feature_direction(tag: str, d: int) -> np.ndarray:
    """Deterministic unit vector for a label, scene, or group-size tag."""
    digest = abs(hash_bytes(tag))
    rng = np.random.default_rng(digest)
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def hash_bytes(tag: str) -> int:
    # stable across processes, unlike builtin hash()
    h = 2166136261
    for b in tag.encode():
        h = ((h ^ b) * 16777619) % (1 << 32)
    return h


def _random_bbox(rng) -> tuple:
    x1 = float(rng.uniform(0.0, 0.55))
    y1 = float(rng.uniform(0.0, 0.55))
    w = float(rng.uniform(0.15, 0.44))
    h = float(rng.uniform(0.15, 0.44))
    return (round(x1, 4), round(y1, 4), round(min(1.0, x1 + w), 4), round(min(1.0, y1 + h), 4))


def _jittered_bbox(bbox, rng) -> tuple:
    # stays heavily overlapping with the source box (IoU well above 0.5)
    x1, y1, x2, y2 = bbox
    dx = float(rng.uniform(0.0, 0.04))
    dy = float(rng.uniform(0.0, 0.04))
    return (
        round(min(x1 + dx, 0.99), 4),
        round(min(y1 + dy, 0.99), 4),
        round(min(x2 + dx, 1.0), 4),
        round(min(y2 + dy, 1.0), 4),
    )


def _sample_count(cfg: GeneratorConfig, rng) -> int:
    counts, probs = zip(*cfg.count_probs)
    return int(rng.choice(counts, p=probs))


def _object_roi(label: str, count: int, cfg: GeneratorConfig, rng) -> np.ndarray:
    roi = feature_direction(label, cfg.d_roi).copy()
    if count > 1:
        roi += cfg.count_signal * feature_direction(f"count:{count}", cfg.d_roi)
    return roi + cfg.roi_noise * rng.standard_normal(cfg.d_roi)


def _mention_tokens(label: str, count: int, color, morph: MorphTable) -> list:
    forms = morph.forms_of(label)
    if count == 1:
        noun = forms[0]
        head = ["a"]
    else:
        noun = forms[1] if len(forms) > 1 else forms[0]
        head = [COUNT_WORDS[count]]
    return head + ([color] if color else []) + [noun]


def _generic_tokens(scene: str, rng) -> list:
    adj = GENERIC_ADJS[rng.integers(len(GENERIC_ADJS))]
    if rng.random() < 0.5:
        return ["a", adj, "view", "of", "the", scene]
    return ["a", adj, scene, "scene"]


def _scene_tail(scene: str, rng) -> list:
    return [PREPOSITIONS[rng.integers(len(PREPOSITIONS))], "the", scene]


def _person_tokens(rng) -> list:
    if rng.random() < 0.5:
        return ["with", "a", "person", "nearby"]
    return ["with", "people", "nearby"]


def _suffix_tokens(cfg: GeneratorConfig, rng) -> list:
    # one optional trailing slot: a person phrase or a time phrase
    roll = rng.random()
    if roll < cfg.person_caption_prob:
        return _person_tokens(rng)
    if roll < cfg.person_caption_prob + 0.2:
        return list(TIME_PHRASES[rng.integers(len(TIME_PHRASES))])
    return []


@dataclass
class _SceneObject:
    label: str
    count: int
    color: object
    detection: DetectedObject


def _generate_image(
    img_id, label_pool, cfg: GeneratorConfig, morph, tax, rng,
    mention_prob: float | None = None,
    generic_prob: float | None = None,
) -> ImageRecord:
    q_base = cfg.mention_prob if mention_prob is None else mention_prob
    g_prob = cfg.generic_prob if generic_prob is None else generic_prob
    lo, hi = cfg.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    labels = [str(l) for l in rng.choice(label_pool, size=min(n_obj, len(label_pool)), replace=False)]
    scene = cfg.scenes[rng.integers(len(cfg.scenes))]

    objects = []
    for label in labels:
        count = _sample_count(cfg, rng)
        color = cfg.colors[rng.integers(len(cfg.colors))] if rng.random() < cfg.color_prob else None
        det = DetectedObject(
            label,
            _random_bbox(rng),
            round(float(rng.uniform(0.6, 1.0)), 4),
            _object_roi(label, count, cfg, rng),
            COPYABLE,
        )
        objects.append(_SceneObject(label, count, color, det))

    copyable = [o.detection for o in objects]
    if rng.random() < cfg.person_detection_prob:
        roi = feature_direction("person", cfg.d_roi) + cfg.roi_noise * rng.standard_normal(cfg.d_roi)
        copyable.append(
            DetectedObject("person", _random_bbox(rng), round(float(rng.uniform(0.6, 1.0)), 4), roi, COPYABLE)
        )
    if objects and rng.random() < cfg.ancestor_box_prob:
        target = objects[rng.integers(len(objects))]
        ancestor = tax.parent[target.label]
        roi = feature_direction(ancestor, cfg.d_roi) + cfg.roi_noise * rng.standard_normal(cfg.d_roi)
        copyable.append(
            DetectedObject(
                ancestor,
                _jittered_bbox(target.detection.bbox, rng),
                round(float(rng.uniform(0.5, 0.9)), 4),
                roi,
                COPYABLE,
            )
        )

    vlo, vhi = cfg.visual_per_image
    visual = []
    for _ in range(int(rng.integers(vlo, vhi + 1))):
        roi = feature_direction(f"scene:{scene}", cfg.d_roi) + cfg.roi_noise * rng.standard_normal(cfg.d_roi)
        visual.append(
            DetectedObject(scene, _random_bbox(rng), round(float(rng.uniform(0.3, 1.0)), 4), roi, VISUAL)
        )

    references = []
    for _ in range(cfg.refs_per_image):
        if rng.random() < g_prob:
            tokens = _generic_tokens(scene, rng)
        else:
            mentioned = [
                o for o in objects if rng.random() < cfg.mention_rate(tax.parent[o.label], q_base)
            ]
            if not mentioned:
                tokens = _generic_tokens(scene, rng)
            else:
                tokens = []
                if len(mentioned) < 3 and rng.random() < 0.25:
                    tokens.extend(["there", "is"] if mentioned[0].count == 1 else ["there", "are"])
                for i, obj in enumerate(mentioned):
                    if i:
                        tokens.append("and")
                    tokens.extend(_mention_tokens(obj.label, obj.count, obj.color, morph))
                tokens.extend(_scene_tail(scene, rng))
        tokens.extend(_suffix_tokens(cfg, rng))
        references.append(" ".join(tokens))

    return ImageRecord(img_id, copyable, visual, references)


def build_label_taxonomy(cfg: GeneratorConfig) -> Taxonomy:
    """Root / class ancestors / leaf labels, plus person under the root."""
    nodes = ["entity"]
    parent = {}
    for cls, (trained, holdout) in cfg.classes.items():
        nodes.append(cls)
        parent[cls] = "entity"
        for label in trained + holdout:
            nodes.append(label)
            parent[label] = cls
    nodes.append("person")
    parent["person"] = "entity"
    return Taxonomy.build(nodes, parent, ["entity"])


def count_label_frequencies(dataset: Dataset, morph: MorphTable) -> dict:
    """Per label, occurrences of any of its forms in the reference captions."""
    freq = dict.fromkeys(morph.labels(), 0)
    by_form = {}
    for label in morph.labels():
        for form in morph.forms_of(label):
            by_form.setdefault(form, []).append(label)
    for img in dataset.images:
        for ref in img.tokenized_references():
            for token in ref:
                for label in by_form.get(token, ()):
                    freq[label] += 1
    return freq


def generate_synthetic(cfg: GeneratorConfig) -> SyntheticCorpus:
    trained = cfg.trained_labels()
    holdout = cfg.holdout_labels()
    if set(trained) & set(holdout):
        raise ValueError("trained and held-out label sets overlap")
    skeleton = build_label_taxonomy(cfg)
    # internal class nodes are emittable detections too (ancestor noise
    # boxes can survive filtering when overlap is low); register them as
    # single-form copyables so the vocabulary and copy head cover them
    class_nouns = {n: (n,) for n in skeleton.internal_nodes()}
    morph = build_morph_table(
        cfg.all_labels() + sorted(class_nouns), overrides=class_nouns
    )
    forms = [f for l in morph.labels() for f in morph.forms_of(l)]
    if len(set(forms)) != len(forms):
        raise ValueError("surface-form collision across labels")

    pools = {
        "train": trained,
        "val_in": trained,
        "val_near": trained + holdout,
        "val_out": holdout,
    }
    sizes = {
        "train": cfg.n_train,
        "val_in": cfg.n_val_in,
        "val_near": cfg.n_val_near,
        "val_out": cfg.n_val_out,
    }
    datasets = {}
    for split_idx, split in enumerate(SPLITS):
        # validation references follow the annotation protocol (dense,
        # object-centric); training captions keep the sparse web-style rates
        is_val = split != "train"
        images = [
            _generate_image(
                f"{split}-{i:05d}",
                pools[split],
                cfg,
                morph,
                skeleton,
                np.random.default_rng([cfg.seed, split_idx, i]),
                mention_prob=cfg.val_mention_prob if is_val else None,
                generic_prob=cfg.val_generic_prob if is_val else None,
            )
            for i in range(sizes[split])
        ]
        datasets[split] = Dataset(split, images)

    # training captions must be unique corpus-wide; frequencies count the
    # deduplicated references so the copy filter sees what training sees
    datasets["train"] = dedup_captions(datasets["train"])
    freq = count_label_frequencies(datasets["train"], morph)
    for label in holdout:
        if freq[label]:
            raise AssertionError(f"held-out label {label!r} leaked into training references")

    counts = {l: c for l, c in freq.items() if c > 0 and l in skeleton._depth}
    abstract = choose_abstract_set(skeleton, counts, cfg.abstract_k)
    tax = Taxonomy.build(skeleton.nodes, skeleton.parent, abstract)
    return SyntheticCorpus(datasets, tax, morph, freq, cfg)


def build_vocabulary(corpus: SyntheticCorpus) -> Vocabulary:
    """Closed vocabulary: training-caption words plus every label form."""
    train_tokens = [
        ref for img in corpus.datasets["train"].images for ref in img.tokenized_references()
    ]
    return Vocabulary.build(train_tokens, extra_words=sorted(corpus.morph.all_forms()))


def dedup_captions(dataset: Dataset) -> Dataset:
    """Keep each caption string only at its first occurrence corpus-wide."""
    seen = set()
    images = []
    for img in dataset.images:
        kept = []
        for cap in img.references:
            if cap not in seen:
                seen.add(cap)
                kept.append(cap)
        if not kept:
            warnings.warn(f"image {img.id}: all references were duplicates, dropping image")
            continue
        images.append(ImageRecord(img.id, img.copyable, img.visual, kept))
    return Dataset(dataset.split, images)


# ---------------------------------------------------------------------------
# file round trip
# ---------------------------------------------------------------------------


def _det_to_doc(d: DetectedObject) -> dict:
    return {
        "label": d.label,
        "bbox": list(d.bbox),
        "confidence": d.confidence,
        "roi": [float(x) for x in d.roi],
    }


def _det_from_doc(doc: dict, source: str, where: str) -> DetectedObject:
    for key in ("label", "bbox", "confidence", "roi"):
        if key not in doc:
            raise ValueError(f"{where}: missing field {key!r}")
    try:
        return DetectedObject(
            doc["label"], tuple(doc["bbox"]), doc["confidence"], np.array(doc["roi"]), source
        )
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{where}: {exc}") from exc


def save_dataset(path, dataset: Dataset) -> None:
    doc = {
        "split": dataset.split,
        "images": [
            {
                "id": img.id,
                "copyable": [_det_to_doc(d) for d in img.copyable],
                "visual": [_det_to_doc(d) for d in img.visual],
                "captions": list(img.references),
            }
            for img in dataset.images
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_dataset(path, d_roi: int | None = None) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a dataset file ({exc})") from exc
    if "split" not in doc or "images" not in doc:
        raise ValueError(f"{path}: missing split/images fields")
    images = []
    for i, rec in enumerate(doc["images"]):
        where = f"{path}: images[{i}]"
        for key in ("id", "copyable", "visual", "captions"):
            if key not in rec:
                raise ValueError(f"{where}: missing field {key!r}")
        copyable = [
            _det_from_doc(d, COPYABLE, f"{where}.copyable[{j}]") for j, d in enumerate(rec["copyable"])
        ]
        visual = [
            _det_from_doc(d, VISUAL, f"{where}.visual[{j}]") for j, d in enumerate(rec["visual"])
        ]
        if not visual:
            raise ValueError(f"{where}: every image needs at least one visual detection")
        if d_roi is not None:
            for d in copyable + visual:
                if d.roi.shape != (d_roi,):
                    raise ValueError(f"{where}: roi dimension {d.roi.shape} != ({d_roi},)")
        images.append(ImageRecord(rec["id"], copyable, visual, list(rec["captions"])))
    return Dataset(doc["split"], images)


def save_caption_freq(path, freq: dict) -> None:
    Path(path).write_text(json.dumps(dict(sorted(freq.items())), indent=1) + "\n")


def load_caption_freq(path) -> dict:
    return json.loads(Path(path).read_text())
