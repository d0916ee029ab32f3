"""Scene-graph data model and triplet matching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Vocab:
    objects: tuple[str, ...]
    predicates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        for label, names in (("objects", self.objects), ("predicates", self.predicates)):
            if not names:
                raise ValueError(f"vocab {label} must be non-empty")
            if len(set(names)) != len(names):
                raise ValueError(f"vocab {label} has duplicate names")

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    @classmethod
    def synthetic(cls, num_objects: int, num_predicates: int) -> "Vocab":
        """Index 0 is ``__background__`` / ``__no_relation__``."""
        objs = ("__background__",) + tuple(f"obj{k}" for k in range(1, num_objects))
        preds = ("__no_relation__",) + tuple(f"rel{k}" for k in range(1, num_predicates))
        return cls(objs, preds)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Entity:
    category: int
    box: Box
    confidence: float = 1.0


@dataclass(frozen=True)
class Triplet:
    subject: int
    object: int
    predicate: int
    score: float = 1.0


@dataclass(frozen=True)
class SceneGraph:
    entities: tuple[Entity, ...]
    triplets: tuple[Triplet, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "triplets", tuple(self.triplets))


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[Box], b: Sequence[Box]) -> np.ndarray:
    """Pairwise IoU between two box lists, shape (len(a), len(b))."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([x.as_tuple() for x in a])
    B = np.array([x.as_tuple() for x in b])
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def rank_triplets(triplets: Sequence[Triplet]) -> list[Triplet]:
    """Descending score; ties broken by (subject, object, predicate) ascending."""
    return sorted(triplets, key=lambda t: (-t.score, t.subject, t.object, t.predicate))


def apply_graph_constraint(ranked: Sequence[Triplet]) -> list[Triplet]:
    """Keep only the first (best-ranked) triplet for every ordered entity pair."""
    seen = set()
    out = []
    for t in ranked:
        key = (t.subject, t.object)
        if key in seen:
            continue
        seen.add(key)
        out.append(t)
    return out


def match_triplets(
    predicted: Sequence[Triplet],
    entities: Sequence[Entity],
    truth: SceneGraph,
    iou_threshold: float = 0.5,
    constraint: bool = True,
    overlaps: np.ndarray | None = None,
) -> set[int]:
    """Indices of truth triplets hit by ``predicted`` (already ranked, best first).

    Predicted triplets are visited in order and each claims the first unmatched
    truth triplet it agrees with, so every truth triplet is matched at most once.
    ``overlaps`` may carry a precomputed predicted-by-truth entity IoU matrix.
    """
    if constraint:
        predicted = apply_graph_constraint(predicted)
    if overlaps is None:
        overlaps = iou_matrix([e.box for e in entities], [e.box for e in truth.entities])
    gt = truth.triplets
    gt_sub = [truth.entities[t.subject].category for t in gt]
    gt_obj = [truth.entities[t.object].category for t in gt]
    matched: set[int] = set()
    for p in predicted:
        if len(matched) == len(gt):
            break
        ps = entities[p.subject].category
        po = entities[p.object].category
        for k, g in enumerate(gt):
            if k in matched or g.predicate != p.predicate:
                continue
            if gt_sub[k] != ps or gt_obj[k] != po:
                continue
            if overlaps[p.subject, g.subject] >= iou_threshold and overlaps[p.object, g.object] >= iou_threshold:
                matched.add(k)
                break
    return matched


def validate(g: SceneGraph, vocab: Vocab, ground_truth: bool = False) -> list[str]:
    """Every invariant violation in ``g``; an empty list means the graph is valid."""
    problems = []
    n = len(g.entities)
    for k, e in enumerate(g.entities):
        if not isinstance(e.category, (int, np.integer)) or not 0 <= e.category < vocab.num_objects:
            problems.append(f"entity {k}: category {e.category} outside [0, {vocab.num_objects})")
        if not 0.0 <= e.confidence <= 1.0:
            problems.append(f"entity {k}: confidence {e.confidence} outside [0, 1]")
        b = e.box
        if not (b.x1 < b.x2 and b.y1 < b.y2):
            problems.append(f"entity {k}: degenerate box")
    pairs = set()
    for k, t in enumerate(g.triplets):
        if not (0 <= t.subject < n and 0 <= t.object < n):
            problems.append(f"triplet {k}: entity index out of range")
        if t.subject == t.object:
            problems.append(f"triplet {k}: subject and object are both entity {t.subject}")
        if not 0 <= t.predicate < vocab.num_predicates:
            problems.append(f"triplet {k}: predicate {t.predicate} outside [0, {vocab.num_predicates})")
        if t.score < 0:
            problems.append(f"triplet {k}: negative score")
        if ground_truth:
            key = (t.subject, t.object)
            if key in pairs:
                problems.append(f"triplet {k}: second ground-truth predicate for pair {key}")
            pairs.add(key)
    return problems
