"""Synthetic contextual scenes standing in for detector output, plus JSONL I/O.

Each scene has an anchor entity (a hub that most relationships attach to).
Other categories are drawn from the anchor's co-occurrence row, predicates
from a peaked predicate-given-pair table. Entity features are noisy category
prototypes; pair features are noisy prototypes of the pair's predicate
(no-relationship included). Initial logits are a scaled one-hot of the true
label, replaced by a wrong label at the corruption rate. Context therefore
carries information an isolated classifier cannot see.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import Box, Entity, SceneGraph, Triplet, Vocab, validate
from .model import SceneInput, ordered_pairs


DEFAULT_SCENES = 5000
DEFAULT_SPLIT = (0.6, 0.2, 0.2)


class DataError(ValueError):
    pass


@dataclass
class SceneRecord:
    scene_id: int
    categories: np.ndarray  # (n,)
    boxes: list[Box]
    features: np.ndarray  # (n, d)
    logits: np.ndarray  # (n, C)
    pair_features: np.ndarray  # (n*(n-1), d)
    relations: list[tuple[int, int, int]]  # (subject, object, predicate), predicate >= 1

    @property
    def n(self) -> int:
        return len(self.categories)

    @property
    def truth(self) -> SceneGraph:
        ents = tuple(Entity(int(c), b, 1.0) for c, b in zip(self.categories, self.boxes))
        return SceneGraph(ents, tuple(Triplet(s, o, p) for s, o, p in self.relations))

    def as_input(self) -> SceneInput:
        return SceneInput(self.features, self.logits, self.pair_features)

    def pair_targets(self) -> np.ndarray:
        """Ground-truth predicate per ordered pair, 0 where unannotated."""
        lookup = {(s, o): p for s, o, p in self.relations}
        return np.array([lookup.get(pair, 0) for pair in ordered_pairs(self.n)], dtype=np.int64)


@dataclass
class WorldSpec:
    num_objects: int = 13  # including background
    num_predicates: int = 7  # including no-relationship
    feat_dim: int = 16
    mean_objects: float = 9.0
    min_objects: int = 2
    max_objects: int = 14
    groups: int = 3
    group_affinity: float = 0.85  # share of co-occurrence mass inside the anchor's group
    predicate_peak: float = 0.8
    hub_rate: float = 0.7  # P(anchor -> j annotated)
    other_rate: float = 0.06  # P(i -> j annotated) for non-anchor pairs
    noise: float = 1.0
    pair_noise: float = 1.0
    corruption: float = 0.3
    logit_scale: float = 2.0
    seed: int = 0
    cooccurrence: np.ndarray | None = field(default=None, repr=False)
    predicate_table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_objects < 2 or self.num_predicates < 2:
            raise DataError("need at least 2 object and 2 predicate categories")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DataError("bad entity-count bounds")
        rng = np.random.default_rng([self.seed, 1])
        C, R = self.num_objects, self.num_predicates
        if self.cooccurrence is None:
            real = np.arange(1, C)
            group = real % max(1, self.groups)
            same = group[:, None] == group[None, :]
            inside = same.sum(axis=1, keepdims=True)
            outside = (~same).sum(axis=1, keepdims=True)
            table = np.where(same, self.group_affinity / inside, (1 - self.group_affinity) / np.maximum(outside, 1))
            full = np.zeros((C, C))
            full[1:, 1:] = table
            self.cooccurrence = full
        if self.predicate_table is None:
            table = np.full((C, C, R), (1 - self.predicate_peak) / max(R - 2, 1))
            table[..., 0] = 0.0
            favourite = rng.integers(1, R, size=(C, C))
            np.put_along_axis(table, favourite[..., None], self.predicate_peak if R > 2 else 1.0, axis=2)
            self.predicate_table = table
        self.cooccurrence = np.asarray(self.cooccurrence, dtype=np.float64)
        self.predicate_table = np.asarray(self.predicate_table, dtype=np.float64)
        rows = self.cooccurrence[1:]
        if rows.shape != (C - 1, C) or np.any(rows < 0) or np.any(rows.sum(axis=1) <= 0):
            raise DataError("co-occurrence table has a degenerate row")
        self.cooccurrence[1:] = rows / rows.sum(axis=1, keepdims=True)
        ptab = self.predicate_table[1:, 1:, 1:]
        if np.any(ptab < 0) or np.any(ptab.sum(axis=2) <= 0):
            raise DataError("predicate table has a degenerate row")
        self.predicate_table[1:, 1:, 1:] = ptab / ptab.sum(axis=2, keepdims=True)

    @property
    def vocab(self) -> Vocab:
        return Vocab.synthetic(self.num_objects, self.num_predicates)

    def prototypes(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, 2])
        return (
            rng.normal(0.0, 1.0, (self.num_objects, self.feat_dim)),
            rng.normal(0.0, 1.0, (self.num_predicates, self.feat_dim)),
        )


def _random_box(rng: np.random.Generator) -> Box:
    x1, y1 = rng.uniform(0.0, 0.7, 2)
    w, h = rng.uniform(0.1, 0.3, 2)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def generate(world: WorldSpec, count: int, start_id: int = 0) -> list[SceneRecord]:
    """``count`` scenes, each drawn from its own seeded stream."""
    if count < 0:
        raise DataError("count must be non-negative")
    obj_proto, pred_proto = world.prototypes()
    C, R = world.num_objects, world.num_predicates
    records = []
    for sid in range(start_id, start_id + count):
        rng = np.random.default_rng([world.seed, 3, sid])
        n = int(np.clip(rng.poisson(world.mean_objects), world.min_objects, world.max_objects))
        anchor = int(rng.integers(1, C))
        cats = [anchor] + [int(rng.choice(C, p=world.cooccurrence[anchor])) for _ in range(n - 1)]
        cats = np.array(cats, dtype=np.int64)
        relations = []
        for i, j in ordered_pairs(n):
            rate = world.hub_rate if i == 0 else world.other_rate
            if rng.random() < rate:
                relations.append((i, j, int(rng.choice(R, p=world.predicate_table[cats[i], cats[j]]))))
        if n > 1 and not relations:
            # keep every multi-entity scene scoreable
            j = int(rng.integers(1, n))
            relations.append((0, j, int(rng.choice(R, p=world.predicate_table[cats[0], cats[j]]))))
        features = obj_proto[cats] + world.noise * rng.normal(0.0, 1.0, (n, world.feat_dim))
        shown = cats.copy()
        for k in range(n):
            if rng.random() < world.corruption:
                shown[k] = int(rng.choice([c for c in range(1, C) if c != cats[k]] or [cats[k]]))
        logits = np.zeros((n, C))
        logits[np.arange(n), shown] = world.logit_scale
        lookup = {(s, o): p for s, o, p in relations}
        pair_pred = np.array([lookup.get(pair, 0) for pair in ordered_pairs(n)], dtype=np.int64)
        pair_features = pred_proto[pair_pred] + world.pair_noise * rng.normal(0.0, 1.0, (len(pair_pred), world.feat_dim))
        if n == 1:
            pair_features = np.zeros((0, world.feat_dim))
        boxes = [_random_box(rng) for _ in range(n)]
        records.append(SceneRecord(sid, cats, boxes, features, logits, pair_features, relations))
    return records


# ------------------------------------------------------------ serialisation


def record_to_dict(rec: SceneRecord) -> dict:
    return {
        "id": rec.scene_id,
        "entities": [
            {
                "category": int(c),
                "box": list(b.as_tuple()),
                "feature": rec.features[k].tolist(),
                "logits": rec.logits[k].tolist(),
            }
            for k, (c, b) in enumerate(zip(rec.categories, rec.boxes))
        ],
        "pair_features": rec.pair_features.tolist(),
        "relations": [list(r) for r in rec.relations],
    }


def record_from_dict(obj: dict, vocab: Vocab) -> SceneRecord:
    ents = obj["entities"]
    n = len(ents)
    if n < 1:
        raise DataError("scene has no entities")
    cats = np.array([int(e["category"]) for e in ents], dtype=np.int64)
    boxes = [Box(*map(float, e["box"])) for e in ents]
    features = np.array([e["feature"] for e in ents], dtype=np.float64)
    logits = np.array([e["logits"] for e in ents], dtype=np.float64)
    if features.ndim != 2:
        raise DataError("entity features have inconsistent lengths")
    d = features.shape[1]
    if logits.shape != (n, vocab.num_objects):
        raise DataError(f"logits shape {logits.shape} does not match {n} entities x {vocab.num_objects} categories")
    pf = np.array(obj["pair_features"], dtype=np.float64).reshape(-1, d) if obj["pair_features"] else np.zeros((0, d))
    if pf.shape != (n * (n - 1), d):
        raise DataError(f"pair features shape {pf.shape}, expected {(n * (n - 1), d)}")
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(logits)) and np.all(np.isfinite(pf))):
        raise DataError("non-finite feature values")
    relations = [tuple(int(v) for v in r) for r in obj["relations"]]
    if any(len(r) != 3 for r in relations):
        raise DataError("relations must be (subject, object, predicate) triples")
    rec = SceneRecord(int(obj["id"]), cats, boxes, features, logits, pf, relations)
    problems = validate(rec.truth, vocab, ground_truth=True)
    if problems:
        raise DataError("; ".join(problems))
    return rec


def dumps(rec: SceneRecord) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"))


def save(records: Iterable[SceneRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")


def load(path, vocab: Vocab) -> list[SceneRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line), vocab))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def save_vocab(vocab: Vocab, path) -> None:
    Path(path).write_text(
        json.dumps({"objects": list(vocab.objects), "predicates": list(vocab.predicates)}, indent=1) + "\n",
        encoding="utf-8",
    )


def load_vocab(path) -> Vocab:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return Vocab(tuple(obj["objects"]), tuple(obj["predicates"]))


def split(records: Sequence[SceneRecord], fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Seeded disjoint partition into (train, val, test)."""
    if not records:
        raise DataError("cannot split an empty record list")
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise DataError("split fractions must be non-negative and sum to 1")
    order = np.random.default_rng(seed).permutation(len(records))
    cuts = np.round(np.cumsum(fractions)[:-1] * len(records)).astype(int)
    parts = np.split(order, cuts)
    return tuple([records[k] for k in sorted(part)] for part in parts)


def make_corpus(world: WorldSpec, scenes: int = DEFAULT_SCENES, fractions=DEFAULT_SPLIT):
    """Generate ``scenes`` scenes and split them with the world's seed."""
    return split(generate(world, scenes), fractions, world.seed)
