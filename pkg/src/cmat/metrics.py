"""Graph-level rewards: Recall@K and a triplet F-score in the spirit of SPICE."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .graph import SceneGraph, apply_graph_constraint, iou_matrix, match_triplets, rank_triplets


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "recall"
    k: int = 20
    constraint: bool = True
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in ("recall", "spice"):
            raise ConfigError(f"unknown reward kind {self.kind!r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")

    @classmethod
    def parse(cls, text: str, constraint: bool = True, iou_threshold: float = 0.5) -> "RewardSpec":
        """Build from ``recall@K`` or ``spice@K``."""
        m = re.fullmatch(r"(recall|spice)@(\d+)", text.strip().lower())
        if not m:
            raise ConfigError(f"reward must look like recall@K or spice@K, got {text!r}")
        return cls(m.group(1), int(m.group(2)), constraint, iou_threshold)

    @property
    def name(self) -> str:
        return f"{self.kind}@{self.k}"


def _top_k(predicted: SceneGraph, spec: RewardSpec):
    ranked = rank_triplets(predicted.triplets)
    if spec.constraint:
        ranked = apply_graph_constraint(ranked)
    return ranked[: spec.k]


def count_matches(predicted: SceneGraph, truth: SceneGraph, spec: RewardSpec, overlaps: np.ndarray | None = None):
    """(matches, number of top-k predictions considered)."""
    top = _top_k(predicted, spec)
    hits = match_triplets(top, predicted.entities, truth, spec.iou_threshold, constraint=False, overlaps=overlaps)
    return len(hits), len(top)


def recall_at_k(predicted: SceneGraph, truth: SceneGraph, spec: RewardSpec, overlaps=None) -> float:
    n_truth = len(truth.triplets)
    if n_truth == 0:
        return 1.0 if not predicted.triplets else 0.0
    hits, _ = count_matches(predicted, truth, spec, overlaps)
    return hits / n_truth


def spice(predicted: SceneGraph, truth: SceneGraph, spec: RewardSpec, overlaps=None) -> float:
    n_truth = len(truth.triplets)
    if n_truth == 0 and not predicted.triplets:
        return 1.0
    hits, n_pred = count_matches(predicted, truth, spec, overlaps)
    if hits == 0:
        return 0.0
    precision = hits / n_pred
    recall = hits / n_truth
    return 2.0 * precision * recall / (precision + recall)


def reward(predicted: SceneGraph, truth: SceneGraph, spec: RewardSpec, overlaps=None) -> float:
    if spec.kind == "recall":
        return recall_at_k(predicted, truth, spec, overlaps)
    if spec.kind == "spice":
        return spice(predicted, truth, spec, overlaps)
    raise ConfigError(f"unknown reward kind {spec.kind!r}")


class TruthIndex:
    """Array view of a ground-truth graph for repeated fast reward evaluation.

    ``boxes`` are the predicted entities' boxes, aligned with agent order; the
    predicted-to-truth IoU test is folded into a boolean matrix once.
    """

    def __init__(self, truth: SceneGraph, boxes=None, iou_threshold: float = 0.5):
        self.truth = truth
        ents = truth.entities
        boxes = [e.box for e in ents] if boxes is None else list(boxes)
        self.overlaps = iou_matrix(boxes, [e.box for e in ents])
        self.close = self.overlaps >= iou_threshold
        self.iou_threshold = iou_threshold
        tr = truth.triplets
        self.sub = np.array([t.subject for t in tr], dtype=np.int64)
        self.obj = np.array([t.object for t in tr], dtype=np.int64)
        self.pred = np.array([t.predicate for t in tr], dtype=np.int64)
        self.sub_cat = np.array([ents[t.subject].category for t in tr], dtype=np.int64)
        self.obj_cat = np.array([ents[t.object].category for t in tr], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pred)


def reward_from_arrays(
    actions: np.ndarray,
    confidences: np.ndarray,
    pair_probs: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    truth: TruthIndex,
    spec: RewardSpec,
) -> float:
    """Same value as :func:`reward` on the graph ``model.assemble_graph`` would build.

    Skips materialising triplet objects; ranking uses the same tie rule.
    """
    n_truth = len(truth)
    n_pairs, R = pair_probs.shape
    if n_truth == 0:
        return 1.0 if n_pairs * (R - 1) == 0 else 0.0
    base = confidences[src] * confidences[dst]
    scores = base[:, None] * pair_probs[:, 1:]
    if spec.constraint:
        best = np.argmax(scores, axis=1)
        cand_pair = np.arange(n_pairs)
        cand_pred = best + 1
        cand_score = scores[cand_pair, best]
    else:
        cand_pair = np.repeat(np.arange(n_pairs), R - 1)
        cand_pred = np.tile(np.arange(1, R), n_pairs)
        cand_score = scores.reshape(-1)
    cand_sub = src[cand_pair]
    cand_obj = dst[cand_pair]
    order = np.lexsort((cand_pred, cand_obj, cand_sub, -cand_score))[: spec.k]
    n_top = len(order)
    ps, po, pp = cand_sub[order], cand_obj[order], cand_pred[order]
    compat = (
        (pp[:, None] == truth.pred[None, :])
        & (actions[ps][:, None] == truth.sub_cat[None, :])
        & (actions[po][:, None] == truth.obj_cat[None, :])
        & truth.close[ps][:, truth.sub]
        & truth.close[po][:, truth.obj]
    )
    free = np.ones(n_truth, dtype=bool)
    hits = 0
    for row in compat:
        avail = np.flatnonzero(row & free)
        if avail.size:
            free[avail[0]] = False
            hits += 1
    if spec.kind == "recall":
        return hits / n_truth
    if hits == 0:
        return 0.0
    precision = hits / n_top
    recall = hits / n_truth
    return 2.0 * precision * recall / (precision + recall)
