"""Object-class hierarchy: abstract-label assignment and detection filtering.

A Taxonomy is a rooted tree of class labels with a designated abstract
subset that always contains the root, so every label resolves to a nearest
abstract ancestor. Detection filtering applies the three copyable-object
rules: drop high-frequency labels, drop the more abstract box of an
overlapping ancestor/descendant pair, then keep one instance per label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COPYABLE = "copyable"
VISUAL = "visual"


@dataclass(frozen=True)
class Taxonomy:
    nodes: tuple
    parent: dict
    abstract_set: frozenset
    _depth: dict = field(default_factory=dict, repr=False, compare=False)

    @staticmethod
    def build(nodes, parent, abstract_set) -> "Taxonomy":
        nodes = tuple(nodes)
        node_set = set(nodes)
        if len(node_set) != len(nodes):
            raise ValueError("duplicate taxonomy nodes")
        roots = [n for n in nodes if n not in parent]
        if len(roots) != 1:
            raise ValueError(f"taxonomy must have exactly one root, found {roots}")
        root = roots[0]
        depth = {}
        for n in nodes:
            seen = []
            cur = n
            while cur is not None:
                if cur in seen:
                    raise ValueError(f"cycle in taxonomy at {cur!r}")
                if cur not in node_set:
                    raise ValueError(f"parent chain leaves node set at {cur!r}")
                seen.append(cur)
                cur = parent.get(cur)
            if seen[-1] != root:
                raise ValueError(f"node {n!r} does not reach the root")
            depth[n] = len(seen) - 1
        abstract = frozenset(abstract_set)
        if not abstract <= node_set:
            raise ValueError("abstract_set contains unknown labels")
        if root not in abstract:
            raise ValueError("abstract_set must contain the root")
        return Taxonomy(nodes, dict(parent), abstract, depth)

    @property
    def root(self):
        return next(n for n in self.nodes if n not in self.parent)

    def ancestors(self, label) -> list:
        """Chain label, parent, ..., root (self included)."""
        if label not in self._depth:
            raise KeyError(f"unknown taxonomy label {label!r}")
        chain = [label]
        while chain[-1] in self.parent:
            chain.append(self.parent[chain[-1]])
        return chain

    def is_ancestor(self, a, b) -> bool:
        """True when a is a strict ancestor of b."""
        return a != b and a in self.ancestors(b)

    def internal_nodes(self) -> list:
        has_child = set(self.parent.values())
        return [n for n in self.nodes if n in has_child]


@dataclass
class DetectedObject:
    """One detector output; copyable objects are copy candidates."""

    label: str
    bbox: tuple
    confidence: float
    roi: np.ndarray
    source: str = COPYABLE

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ValueError(f"degenerate or unnormalized bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.source not in (COPYABLE, VISUAL):
            raise ValueError(f"unknown source {self.source!r}")
        self.roi = np.asarray(self.roi, dtype=np.float64)

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.bbox
        return (x2 - x1) * (y2 - y1)


def iou(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def assign_abstract_label(label, tax: Taxonomy):
    """Nearest ancestor-or-self belonging to the abstract set."""
    for node in tax.ancestors(label):
        if node in tax.abstract_set:
            return node
    raise AssertionError("unreachable: abstract set contains the root")


def _aggregated_counts(tax: Taxonomy, chosen: set, label_counts: dict) -> np.ndarray:
    totals = {node: 0 for node in chosen}
    for label, count in label_counts.items():
        for node in tax.ancestors(label):
            if node in chosen:
                totals[node] += count
                break
    return np.array([totals[n] for n in sorted(totals)], dtype=np.float64)


def choose_abstract_set(tax: Taxonomy, label_counts: dict, k: int) -> frozenset:
    """Pick k internal nodes (root always included) by greedy refinement:
    repeatedly add the candidate that most reduces the variance of
    per-abstract-label aggregated training counts, then apply
    steepest-descent swaps until no single exchange lowers the variance.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    for label in label_counts:
        if label not in tax._depth:
            raise KeyError(f"count for unknown label {label!r}")
    candidates = tax.internal_nodes()
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds the {len(candidates)} internal nodes")

    def variance(chosen):
        return float(np.var(_aggregated_counts(tax, chosen, label_counts)))

    chosen = {tax.root}
    while len(chosen) < k:
        best = None
        for node in sorted(c for c in candidates if c not in chosen):
            var = variance(chosen | {node})
            if best is None or var < best[0]:
                best = (var, node)
        chosen.add(best[1])

    current = variance(chosen)
    improved = True
    while improved:
        improved = False
        best = None
        for out in sorted(chosen - {tax.root}):
            for into in sorted(c for c in candidates if c not in chosen):
                var = variance(chosen - {out} | {into})
                if var < current - 1e-12 and (best is None or var < best[0]):
                    best = (var, out, into)
        if best is not None:
            current, out, into = best
            chosen = chosen - {out} | {into}
            improved = True
    return frozenset(chosen)


def filter_copyable(
    detections: list,
    caption_freq: dict,
    freq_threshold: int = 100,
    overlap_threshold: float = 0.5,
    tax: Taxonomy | None = None,
) -> list:
    """Reduce raw copyable detections to distinct copy candidates.

    In order: (1) drop labels whose training-caption frequency reaches
    freq_threshold; (2) for box pairs with IoU >= overlap_threshold where
    one label is a taxonomy ancestor of the other, drop the ancestor (it
    needs a taxonomy; rule 2 is skipped when tax is None); (3) keep the
    single best instance per label, ranked by confidence, then box area,
    then input order.
    """
    if any(d.source != COPYABLE for d in detections):
        raise ValueError("filter_copyable expects copyable-source detections only")

    kept = [d for d in detections if caption_freq.get(d.label, 0) < freq_threshold]

    if tax is not None:
        dropped = set()
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                a, b = kept[i], kept[j]
                if iou(a.bbox, b.bbox) < overlap_threshold:
                    continue
                if tax.is_ancestor(a.label, b.label):
                    dropped.add(i)
                elif tax.is_ancestor(b.label, a.label):
                    dropped.add(j)
        kept = [d for i, d in enumerate(kept) if i not in dropped]

    best_by_label = {}
    for order, det in enumerate(kept):
        rank = (det.confidence, det.area, -order)
        incumbent = best_by_label.get(det.label)
        if incumbent is None or rank > incumbent[0]:
            best_by_label[det.label] = (rank, order, det)
    survivors = sorted(best_by_label.values(), key=lambda t: t[1])
    return [det for _, _, det in survivors]


def save_taxonomy(path, tax: Taxonomy) -> None:
    doc = {
        "nodes": list(tax.nodes),
        "parent": dict(tax.parent),
        "abstract_set": sorted(tax.abstract_set),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_taxonomy(path) -> Taxonomy:
    doc = json.loads(Path(path).read_text())
    return Taxonomy.build(doc["nodes"], doc["parent"], doc["abstract_set"])
