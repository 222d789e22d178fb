"""Per-image model inputs: retained copy candidates plus visual context.

Copyable objects come first so the encoder output rows 0..k_f-1 index the
copy candidates directly. The 8-entry positional vector is (x1, y1, x2,
y2, width, height, area, confidence), all in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..morph import MorphTable
from ..taxonomy import DetectedObject, Taxonomy, assign_abstract_label, filter_copyable


def positional_features(det: DetectedObject) -> np.ndarray:
    x1, y1, x2, y2 = det.bbox
    return np.array(
        [x1, y1, x2, y2, x2 - x1, y2 - y1, det.area, det.confidence], dtype=np.float64
    )


@dataclass
class ObjectInputs:
    F: list  # copyable detections, post filtering
    G: list  # visual detections
    labels: tuple  # F labels, aligned by index
    forms: tuple  # per F object, that label's surface forms
    abstract_ids: tuple  # per F object, index into the model's abstract list

    def __post_init__(self):
        if not self.G:
            raise ValueError("every image needs at least one visual object")

    @property
    def k_f(self) -> int:
        return len(self.F)

    @property
    def k_g(self) -> int:
        return len(self.G)

    def rois(self) -> np.ndarray:
        return np.stack([d.roi for d in self.F + self.G])

    def positions(self) -> np.ndarray:
        return np.stack([positional_features(d) for d in self.F + self.G])


def prepare_inputs(
    image,
    tax: Taxonomy,
    morph: MorphTable,
    abstract_labels: tuple,
    caption_freq: dict,
    freq_threshold: int = 100,
    overlap_threshold: float = 0.5,
) -> ObjectInputs:
    """Filter an image's copyable detections and bundle the model inputs."""
    retained = filter_copyable(
        image.copyable, caption_freq, freq_threshold, overlap_threshold, tax
    )
    abstract_index = {a: i for i, a in enumerate(abstract_labels)}
    ids = tuple(
        abstract_index[assign_abstract_label(d.label, tax)] for d in retained
    )
    return ObjectInputs(
        F=retained,
        G=list(image.visual),
        labels=tuple(d.label for d in retained),
        forms=tuple(morph.forms_of(d.label) for d in retained),
        abstract_ids=ids,
    )
