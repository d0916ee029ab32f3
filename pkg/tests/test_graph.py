import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmat.graph import (
    Box,
    Entity,
    SceneGraph,
    Triplet,
    Vocab,
    apply_graph_constraint,
    iou,
    iou_matrix,
    match_triplets,
    rank_triplets,
    validate,
)

VOCAB = Vocab.synthetic(6, 4)


@st.composite
def boxes(draw):
    x1 = draw(st.floats(0.0, 0.9))
    y1 = draw(st.floats(0.0, 0.9))
    w = draw(st.floats(0.01, 1.0 - x1))
    h = draw(st.floats(0.01, 1.0 - y1))
    return Box(x1, y1, x1 + w, y1 + h)


def test_iou_identical_and_disjoint():
    a = Box(0.1, 0.2, 0.5, 0.6)
    assert iou(a, a) == 1.0
    assert iou(a, Box(0.6, 0.6, 0.9, 0.9)) == 0.0


def test_iou_offset_squares():
    # overlap 0.1 x 0.1, each area 0.04, union 0.07
    assert iou(Box(0, 0, 0.2, 0.2), Box(0.1, 0.1, 0.3, 0.3)) == pytest.approx(1 / 7, rel=1e-12)


@settings(max_examples=200)
@given(boxes(), boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-15)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou_matrix([a], [b])[0, 0] == pytest.approx(v, abs=1e-12)


def test_vocab_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        Vocab(("bg", "a", "a"), ("none",))
    with pytest.raises(ValueError):
        Vocab((), ("none",))


def _scene(cats, rels):
    ents = tuple(Entity(c, Box(0.1 * k, 0.0, 0.1 * k + 0.05, 0.5)) for k, c in enumerate(cats))
    return SceneGraph(ents, tuple(Triplet(s, o, p) for s, o, p in rels))


def oracle_matches(predicted, entities, truth, thr):
    """Maximum matching by trying every injective assignment of truth to predictions."""
    ok = [
        [
            p.predicate == g.predicate
            and entities[p.subject].category == truth.entities[g.subject].category
            and entities[p.object].category == truth.entities[g.object].category
            and iou(entities[p.subject].box, truth.entities[g.subject].box) >= thr
            and iou(entities[p.object].box, truth.entities[g.object].box) >= thr
            for g in truth.triplets
        ]
        for p in predicted
    ]
    best = set()
    for r in range(len(truth.triplets), 0, -1):
        for chosen in itertools.combinations(range(len(truth.triplets)), r):
            for preds in itertools.permutations(range(len(predicted)), r):
                if all(ok[p][g] for p, g in zip(preds, chosen)):
                    return set(chosen)
    return best


def test_match_identity():
    truth = _scene([1, 2, 3, 4], [(0, 1, 1), (0, 2, 2), (3, 1, 3), (2, 3, 1)])
    hits = match_triplets(rank_triplets(truth.triplets), truth.entities, truth)
    assert hits == {0, 1, 2, 3}


def test_match_empty_prediction():
    truth = _scene([1, 2], [(0, 1, 1)])
    assert match_triplets([], truth.entities, truth) == set()


def test_match_two_of_four_with_decoys_ranked_first():
    truth = _scene([1, 2, 3, 4], [(0, 1, 1), (0, 2, 2), (3, 1, 3), (2, 3, 1)])
    predicted = [
        Triplet(1, 0, 1, 0.9),  # reversed direction
        Triplet(0, 3, 2, 0.8),  # unannotated pair
        Triplet(2, 1, 3, 0.7),  # wrong subject
        Triplet(0, 2, 2, 0.5),  # hit: truth 1
        Triplet(2, 3, 1, 0.4),  # hit: truth 3
    ]
    ranked = rank_triplets(predicted)
    hits = match_triplets(ranked, truth.entities, truth)
    assert hits == oracle_matches(ranked, truth.entities, truth, 0.5) == {1, 3}


def test_graph_constraint_keeps_best_predicate_per_pair():
    truth = _scene([1, 2], [(0, 1, 2)])
    predicted = rank_triplets([Triplet(0, 1, 1, 0.6), Triplet(0, 1, 2, 0.4)])
    assert match_triplets(predicted, truth.entities, truth, constraint=True) == set()
    assert match_triplets(predicted, truth.entities, truth, constraint=False) == {0}


def test_iou_threshold_applies():
    truth = _scene([1, 2], [(0, 1, 1)])
    shifted = tuple(Entity(e.category, Box(e.box.x1 + 0.04, e.box.y1, e.box.x2 + 0.04, e.box.y2)) for e in truth.entities)
    assert match_triplets(truth.triplets, shifted, truth, iou_threshold=0.5) == set()
    assert match_triplets(truth.triplets, shifted, truth, iou_threshold=0.1) == {0}


def test_rank_ties_break_by_indices():
    ts = [Triplet(1, 0, 2, 0.5), Triplet(0, 1, 3, 0.5), Triplet(0, 1, 1, 0.5), Triplet(2, 0, 1, 0.7)]
    assert [(t.subject, t.object, t.predicate) for t in rank_triplets(ts)] == [(2, 0, 1), (0, 1, 1), (0, 1, 3), (1, 0, 2)]


@st.composite
def scenes_and_predictions(draw):
    n = draw(st.integers(2, 5))
    cats = draw(st.lists(st.integers(1, 5), min_size=n, max_size=n))
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=4))
    rels = [(i, j, draw(st.integers(1, 3))) for i, j in chosen]
    preds = draw(
        st.lists(
            st.tuples(st.sampled_from(pairs), st.integers(1, 3), st.floats(0.0, 1.0)),
            max_size=10,
        )
    )
    pred_cats = [c if draw(st.booleans()) else draw(st.integers(0, 5)) for c in cats]
    truth = _scene(cats, rels)
    ents = tuple(Entity(c, e.box) for c, e in zip(pred_cats, truth.entities))
    ranked = rank_triplets([Triplet(i, j, r, s) for (i, j), r, s in preds])
    return truth, ents, ranked


@settings(max_examples=150, deadline=None)
@given(scenes_and_predictions())
def test_match_properties(case):
    truth, ents, ranked = case
    hits = match_triplets(ranked, ents, truth, constraint=False)
    assert len(hits) <= min(len(ranked), len(truth.triplets))
    assert len(hits) == len(oracle_matches(ranked, ents, truth, 0.5))
    constrained = apply_graph_constraint(ranked)
    assert len({(t.subject, t.object) for t in constrained}) == len(constrained)
    assert match_triplets(ranked, ents, truth, constraint=True) == match_triplets(constrained, ents, truth, constraint=False)


def test_validate_accepts_well_formed():
    assert validate(_scene([1, 2, 3], [(0, 1, 1), (2, 0, 3)]), VOCAB, ground_truth=True) == []


def test_validate_reports_self_loop():
    problems = validate(_scene([1, 2], [(1, 1, 1)]), VOCAB)
    assert any("subject and object" in p for p in problems)


def test_validate_reports_category_overflow():
    problems = validate(_scene([1, VOCAB.num_objects], []), VOCAB)
    assert any("category" in p for p in problems)


def test_validate_reports_duplicate_truth_pair_and_bad_index():
    problems = validate(_scene([1, 2], [(0, 1, 1), (0, 1, 2), (0, 5, 1)]), VOCAB, ground_truth=True)
    assert any("second ground-truth" in p for p in problems)
    assert any("out of range" in p for p in problems)


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        Box(0.5, 0.1, 0.5, 0.2)
