import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmat.graph import Box, Entity, SceneGraph, Triplet
from cmat.metrics import (
    ConfigError,
    RewardSpec,
    TruthIndex,
    recall_at_k,
    reward,
    reward_from_arrays,
    spice,
)
from cmat.model import assemble_graph, ordered_pairs


def scene(cats, rels, scores=None):
    ents = tuple(Entity(c, Box(0.15 * k, 0.1, 0.15 * k + 0.1, 0.9)) for k, c in enumerate(cats))
    scores = scores or [1.0] * len(rels)
    return SceneGraph(ents, tuple(Triplet(s, o, p, sc) for (s, o, p), sc in zip(rels, scores)))


RECALL20 = RewardSpec("recall", 20)
SPICE20 = RewardSpec("spice", 20)


def test_parse_names():
    assert RewardSpec.parse("recall@20") == RECALL20
    assert RewardSpec.parse("spice@5").k == 5
    for bad in ("recall", "precision@3", "recall@0", "spice@x"):
        with pytest.raises(ConfigError):
            RewardSpec.parse(bad)


def test_recall_identity_and_empty():
    truth = scene([1, 2, 3, 4], [(0, 1, 1), (0, 2, 2), (1, 2, 1), (3, 0, 2), (2, 3, 3)])
    assert recall_at_k(truth, truth, RECALL20) == 1.0
    empty = SceneGraph(truth.entities, ())
    assert recall_at_k(empty, scene([1, 2, 3], [(0, 1, 1), (1, 2, 1), (2, 0, 1)]), RECALL20) == 0.0


def test_recall_half():
    truth = scene([1, 2, 3, 4], [(0, 1, 1), (0, 2, 2), (3, 1, 3), (2, 3, 1)])
    # two hits, three misses ranked above them
    pred = scene([1, 2, 3, 4], [(1, 0, 1), (0, 3, 2), (2, 1, 3), (0, 2, 2), (2, 3, 1)], [0.9, 0.8, 0.7, 0.5, 0.4])
    assert recall_at_k(pred, truth, RECALL20) == 0.5


def test_empty_truth_conventions():
    none = scene([1, 2], [])
    assert recall_at_k(none, none, RECALL20) == 1.0
    assert recall_at_k(scene([1, 2], [(0, 1, 1)]), none, RECALL20) == 0.0


def test_spice_cases():
    truth = scene([1, 2, 3, 4], [(0, 1, 1), (0, 2, 2), (3, 1, 3), (2, 3, 1)])
    assert spice(truth, truth, SPICE20) == 1.0
    # one hit among two predictions: precision 1/2, recall 1/4, F = 2*(1/8)/(3/4) = 1/3
    pred = scene([1, 2, 3, 4], [(0, 1, 1), (1, 0, 1)], [0.9, 0.8])
    assert spice(pred, truth, SPICE20) == pytest.approx(1 / 3, rel=1e-12)
    disjoint = scene([1, 2, 3, 4], [(1, 0, 3), (3, 2, 2)])
    assert spice(disjoint, truth, SPICE20) == 0.0


def test_reward_dispatch():
    truth = scene([1, 2, 3], [(0, 1, 1), (2, 1, 2)])
    assert reward(truth, truth, RECALL20) == 1.0
    assert reward(scene([1, 2, 3], [(1, 0, 2)]), truth, SPICE20) == 0.0
    bad = RewardSpec.__new__(RewardSpec)
    object.__setattr__(bad, "kind", "bleu")
    object.__setattr__(bad, "k", 3)
    object.__setattr__(bad, "constraint", True)
    object.__setattr__(bad, "iou_threshold", 0.5)
    with pytest.raises(ConfigError):
        reward(truth, truth, bad)


def toy_graphs():
    """Four edges; the two labellings differ only in node a (index 0)."""
    a, b, c, d = 1, 2, 3, 4
    edges = [(0, 1, 1), (0, 2, 1), (1, 3, 2), (2, 3, 2)]
    truth = scene([a, b, c, d], edges)
    # labelling 1: every node right, predicate of (c, d) wrong -> 3 right / 1 wrong
    first = scene([a, b, c, d], edges[:3] + [(2, 3, 3)])
    # labelling 2: node a mislabelled too -> 1 right / 3 wrong
    second = scene([5, b, c, d], edges[:3] + [(2, 3, 3)])
    return truth, first, second


def test_local_sensitivity_toy():
    truth, first, second = toy_graphs()
    spec = RewardSpec("recall", 4)
    assert reward(first, truth, spec) == 0.75
    assert reward(second, truth, spec) == 0.25


@st.composite
def scored_instances(draw):
    n = draw(st.integers(2, 5))
    C, R = 5, 4
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    truth_cats = rng.integers(1, C, size=n)
    pairs = ordered_pairs(n)
    chosen = rng.choice(len(pairs), size=rng.integers(0, len(pairs) + 1), replace=False)
    rels = [(pairs[k][0], pairs[k][1], int(rng.integers(1, R))) for k in chosen]
    truth = scene(truth_cats.tolist(), rels)
    actions = np.where(rng.random(n) < 0.7, truth_cats, rng.integers(0, C, size=n))
    conf = rng.uniform(0.05, 1.0, n)
    if draw(st.booleans()):
        conf = np.round(conf, 1)  # force ties
    pp = rng.dirichlet(np.ones(R), size=len(pairs))
    if draw(st.booleans()):
        pp = np.round(pp, 1) + 1e-3
        pp /= pp.sum(axis=1, keepdims=True)
    return truth, actions, conf, pp


@settings(max_examples=200, deadline=None)
@given(scored_instances(), st.integers(1, 25), st.booleans(), st.sampled_from(["recall", "spice"]))
def test_fast_reward_matches_object_path(case, k, constraint, kind):
    truth, actions, conf, pp = case
    n = len(actions)
    boxes = [e.box for e in truth.entities]
    pred = assemble_graph(actions, conf, pp, boxes)
    spec = RewardSpec(kind, k, constraint)
    src = np.array([i for i, _ in ordered_pairs(n)], dtype=np.int64)
    dst = np.array([j for _, j in ordered_pairs(n)], dtype=np.int64)
    fast = reward_from_arrays(actions, conf, pp, src, dst, TruthIndex(truth, boxes), spec)
    assert fast == reward(pred, truth, spec)


@settings(max_examples=100, deadline=None)
@given(scored_instances(), st.booleans())
def test_metric_properties(case, constraint):
    truth, actions, conf, pp = case
    pred = assemble_graph(actions, conf, pp, [e.box for e in truth.entities])
    recalls = [recall_at_k(pred, truth, RewardSpec("recall", k, constraint)) for k in range(1, 30)]
    assert all(0.0 <= r <= 1.0 for r in recalls)
    assert all(a <= b for a, b in zip(recalls, recalls[1:]))
    for k in (1, 5, 20):
        s = spice(pred, truth, RewardSpec("spice", k, constraint))
        assert 0.0 <= s <= 1.0
        hits_spec = RewardSpec("recall", k, constraint)
        if truth.triplets:
            r = recall_at_k(pred, truth, hits_spec)
            top = min(k, len(pred.triplets) if not constraint else len({(t.subject, t.object) for t in pred.triplets}))
            p = r * len(truth.triplets) / top if top else 0.0
            assert s <= 2 * min(p, r) + 1e-12


@settings(max_examples=100, deadline=None)
@given(scored_instances(), st.integers(0, 2**31))
def test_metrics_invariant_to_consistent_relabelling(case, seed):
    truth, actions, conf, pp = case
    n = len(actions)
    perm = np.random.default_rng(seed).permutation(n)  # new index of old entity k is perm[k]
    inv = np.argsort(perm)
    pred = assemble_graph(actions, conf, pp, [e.box for e in truth.entities])

    def relabel(g):
        ents = tuple(g.entities[inv[k]] for k in range(n))
        trips = tuple(Triplet(int(perm[t.subject]), int(perm[t.object]), t.predicate, t.score) for t in g.triplets)
        return SceneGraph(ents, trips)

    for spec in (RewardSpec("recall", 20), RewardSpec("spice", 20), RewardSpec("recall", 100, False)):
        # ties broken by index may reorder under relabelling, so use a k that covers every triplet
        wide = RewardSpec(spec.kind, 1000, spec.constraint)
        assert reward(relabel(pred), relabel(truth), wide) == reward(pred, truth, wide)
