"""Communicating object agents and the pairwise relation head.

Agents of one or more scenes are stacked into a single block of rows and the
ordered pairs (i, j), i != j, of each scene into another; ``src``/``dst`` index
arrays tie pair rows back to agent rows, so a whole batch runs through one
sequence of matrix ops. Shapes follow a row-vector convention: a weight of
shape (in, out) maps a row ``x`` to ``x @ W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Box, Entity, SceneGraph, Triplet

UNIT_BOX = Box(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class Dims:
    hidden: int = 32  # h
    feat: int = 16  # d
    embed: int = 16  # e
    rel: int = 16  # z
    num_objects: int = 13
    num_predicates: int = 7


def parameter_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    h, d, e, z = dims.hidden, dims.feat, dims.embed, dims.rel
    C, R = dims.num_objects, dims.num_predicates
    return {
        # LSTM over [x, e_prev, h_prev]; gate column blocks are (input, forget, cell, output)
        "lstm_w": (d + e + h, 4 * h),
        "lstm_b": (4 * h,),
        "W_h": (h, C),
        "E": (C, e),
        "W_u": (h, h),
        "W_p": (d, h),
        "w_u": (2 * h, 1),
        "w_p": (h + d, 1),
        "W_x": (h, d),
        "W_s": (h, d),
        "W_e": (h, d),
        "W_o": (h + e, z),
        "W_z": (d, z),
        "W_r": (z, 2 * z),
        "W_fx": (2 * z, 2 * z),
        "W_fy": (2 * z, 2 * z),
        "W_cls": (2 * z, R),
        "freq_bias": (C, C, R),
    }


@dataclass
class ModelParameters:
    dims: Dims
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.dims, {k: Tensor(t.value.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()}
        )

    @classmethod
    def init(cls, dims: Dims, seed: int = 0) -> "ModelParameters":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(dims).items():
            if name == "freq_bias":
                value = np.zeros(shape)
            elif name == "lstm_w":
                value = rng.uniform(-0.1, 0.1, shape)
            elif name == "lstm_b":
                value = rng.uniform(-0.1, 0.1, shape)
                h = dims.hidden
                value[h : 2 * h] = 1.0
            elif name == "E":
                value = rng.normal(0.0, 1.0, shape)
            else:
                bound = np.sqrt(3.0 / shape[0])
                value = rng.uniform(-bound, bound, shape)
            tensors[name] = Tensor(value, requires_grad=True, name=name)
        return cls(dims, tensors)


def ordered_pairs(n: int) -> list[tuple[int, int]]:
    """Canonical ordering of ordered pairs: subject-major, skipping i == j."""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


@dataclass
class SceneInput:
    """Per-entity features, initial logits, and per-pair features of one scene."""

    features: np.ndarray  # (n, d)
    logits: np.ndarray  # (n, C)
    pair_features: np.ndarray  # (n*(n-1), d), ordered as ordered_pairs(n)

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class Batch:
    x0: np.ndarray
    s0: np.ndarray
    pair0: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    agent_offsets: np.ndarray  # scene k owns agent rows [agent_offsets[k], agent_offsets[k+1])
    pair_offsets: np.ndarray

    @property
    def num_agents(self) -> int:
        return self.x0.shape[0]

    @property
    def num_scenes(self) -> int:
        return len(self.agent_offsets) - 1

    def agents(self, k: int) -> slice:
        return slice(self.agent_offsets[k], self.agent_offsets[k + 1])

    def pairs(self, k: int) -> slice:
        return slice(self.pair_offsets[k], self.pair_offsets[k + 1])


def make_batch(scenes: Sequence[SceneInput], dims: Dims | None = None) -> Batch:
    if not scenes:
        raise ValueError("empty batch")
    xs, ss, ps, srcs, dsts = [], [], [], [], []
    agent_offsets, pair_offsets = [0], [0]
    for sc in scenes:
        n = sc.n
        if n < 1:
            raise ValueError("scene needs at least one entity")
        if sc.pair_features.shape[0] != n * (n - 1):
            raise ad.ShapeError("make_batch (pair features)", sc.pair_features.shape, (n * (n - 1),))
        if dims is not None:
            if sc.features.shape != (n, dims.feat) or sc.logits.shape != (n, dims.num_objects):
                raise ad.ShapeError("make_batch (entity arrays)", sc.features.shape, sc.logits.shape)
            if n > 1 and sc.pair_features.shape[1] != dims.feat:
                raise ad.ShapeError("make_batch (pair features)", sc.pair_features.shape)
        base = agent_offsets[-1]
        pairs = ordered_pairs(n)
        srcs.extend(base + i for i, _ in pairs)
        dsts.extend(base + j for _, j in pairs)
        xs.append(sc.features)
        ss.append(sc.logits)
        ps.append(sc.pair_features.reshape(len(pairs), -1) if pairs else np.zeros((0, sc.features.shape[1])))
        agent_offsets.append(base + n)
        pair_offsets.append(pair_offsets[-1] + len(pairs))
    return Batch(
        np.concatenate(xs).astype(np.float64),
        np.concatenate(ss).astype(np.float64),
        np.concatenate(ps).astype(np.float64),
        np.asarray(srcs, dtype=np.int64),
        np.asarray(dsts, dtype=np.int64),
        np.asarray(agent_offsets, dtype=np.int64),
        np.asarray(pair_offsets, dtype=np.int64),
    )


@dataclass
class AgentState:
    h: Tensor  # (N, h) hidden state
    c: Tensor  # (N, h) LSTM cell
    x: Tensor  # (N, d) time-step input
    s: Tensor  # (N, C) class logits
    e: Tensor  # (N, e) soft label embedding
    hij: Tensor  # (P, d) pair state
    step: int = 0
    batch: Batch | None = field(default=None, repr=False)

    @property
    def probs(self) -> np.ndarray:
        z = self.s.value - self.s.value.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)


def init_states(batch: Batch, params: ModelParameters) -> AgentState:
    dims = params.dims
    N = batch.num_agents
    if batch.x0.shape[1] != dims.feat or batch.s0.shape[1] != dims.num_objects:
        raise ad.ShapeError("init_states", batch.x0.shape, batch.s0.shape)
    s = Tensor(batch.s0)
    e = ad.matmul(ad.softmax(s), params["E"])
    zeros = Tensor(np.zeros((N, dims.hidden)))
    return AgentState(zeros, zeros, Tensor(batch.x0), s, e, Tensor(batch.pair0), 0, batch)


def extract_step(state: AgentState, params: ModelParameters) -> AgentState:
    hd = params.dims.hidden
    gates = ad.add(ad.matmul(ad.concat([state.x, state.e, state.h], axis=1), params["lstm_w"]), params["lstm_b"])
    i = ad.sigmoid(ad.columns(gates, 0, hd))
    f = ad.sigmoid(ad.columns(gates, hd, 2 * hd))
    g = ad.tanh(ad.columns(gates, 2 * hd, 3 * hd))
    o = ad.sigmoid(ad.columns(gates, 3 * hd, 4 * hd))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    s = ad.add(state.s, ad.matmul(h, params["W_h"]))
    e = ad.matmul(ad.softmax(s), params["E"])
    return AgentState(h, c, state.x, s, e, state.hij, state.step + 1, state.batch)


def compose_messages(state: AgentState, params: ModelParameters) -> tuple[Tensor, Tensor]:
    """Unary messages (N, h) and pairwise messages (P, h)."""
    return ad.matmul(state.h, params["W_u"]), ad.matmul(state.hij, params["W_p"])


def attention_weights(state: AgentState, params: ModelParameters) -> tuple[Tensor, Tensor]:
    """Per-pair weights over neighbours j and over pair states (i, j), normalised per subject i."""
    b = state.batch
    N = b.num_agents
    hi = ad.take(state.h, b.src)
    hj = ad.take(state.h, b.dst)
    P = len(b.src)
    u_unary = ad.reshape(ad.matmul(ad.concat([hi, hj], axis=1), params["w_u"]), (P,))
    u_pair = ad.reshape(ad.matmul(ad.concat([hi, state.hij], axis=1), params["w_p"]), (P,))
    return ad.segment_softmax(u_unary, b.src, N), ad.segment_softmax(u_pair, b.src, N)


def attention_update(state: AgentState, messages: tuple[Tensor, Tensor], params: ModelParameters) -> AgentState:
    b = state.batch
    N = b.num_agents
    m_unary, m_pair = messages
    a_unary, a_pair = attention_weights(state, params)
    ctx_unary = ad.segment_sum(ad.scale_rows(ad.take(m_unary, b.dst), a_unary), b.src, N)
    ctx_pair = ad.segment_sum(ad.scale_rows(m_pair, a_pair), b.src, N)
    x = ad.matmul(ad.relu(ad.add(ad.add(state.h, ctx_unary), ctx_pair)), params["W_x"])
    to_subject = ad.take(ad.matmul(state.h, params["W_s"]), b.src)
    to_object = ad.take(ad.matmul(state.h, params["W_e"]), b.dst)
    hij = ad.relu(ad.add(ad.add(state.hij, to_subject), to_object))
    return AgentState(state.h, state.c, x, state.s, state.e, hij, state.step, b)


def communicate(state: AgentState, params: ModelParameters, steps: int) -> AgentState:
    if steps < 1:
        raise ValueError("need at least one communication round")
    for _ in range(steps):
        state = extract_step(state, params)
        state = attention_update(state, compose_messages(state, params), params)
    return extract_step(state, params)


def forward(batch: Batch, params: ModelParameters, steps: int) -> AgentState:
    return communicate(init_states(batch, params), params, steps)


# ------------------------------------------------------------ relation head


def relation_logits(state: AgentState, actions, params: ModelParameters) -> Tensor:
    """Predicate logits (P, R) for every ordered pair given agent categories."""
    b = state.batch
    C = params.dims.num_objects
    R = params.dims.num_predicates
    actions = np.asarray(actions, dtype=np.int64)
    z = ad.matmul(ad.concat([state.h, ad.take(params["E"], actions)], axis=1), params["W_o"])
    pair_x = ad.concat([ad.take(z, b.src), ad.take(z, b.dst)], axis=1)
    pair_y = ad.matmul(ad.matmul(state.hij, params["W_z"]), params["W_r"])
    fx = ad.matmul(pair_x, params["W_fx"])
    fy = ad.matmul(pair_y, params["W_fy"])
    fused = ad.sub(ad.relu(ad.add(fx, fy)), ad.square(ad.sub(fx, fy)))
    table = ad.reshape(params["freq_bias"], (C * C, R))
    bias = ad.take(table, actions[b.src] * C + actions[b.dst])
    return ad.add(ad.matmul(fused, params["W_cls"]), bias)


def predict_relations(state: AgentState, actions, params: ModelParameters) -> np.ndarray:
    """Predicate distributions (P, R); values only."""
    logits = relation_logits(state, actions, params).value
    return _softmax_rows(logits)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


class RelationCache:
    """Precomputed per-agent/per-category pieces of the relation head for one scene.

    Evaluates predicate distributions for many alternative action vectors at
    once without a tape; used by counterfactual baselines.
    """

    def __init__(self, state: AgentState, params: ModelParameters, scene: int = 0):
        b = state.batch
        ag, pr = b.agents(scene), b.pairs(scene)
        base = b.agent_offsets[scene]
        self.n = ag.stop - ag.start
        self.src = b.src[pr] - base
        self.dst = b.dst[pr] - base
        dims = params.dims
        z, C = dims.rel, dims.num_objects
        h = state.h.value[ag]
        hij = state.hij.value[pr]
        W_o = params["W_o"].value
        W_fx = params["W_fx"].value
        # z for agent i taking category c: (n, C, z)
        zc = (h @ W_o[: dims.hidden])[:, None, :] + (params["E"].value @ W_o[dims.hidden :])[None, :, :]
        self.subj_part = zc @ W_fx[:z]  # (n, C, 2z)
        self.obj_part = zc @ W_fx[z:]
        self.fy = ((hij @ params["W_z"].value) @ params["W_r"].value) @ params["W_fy"].value  # (p, 2z)
        self.W_cls = params["W_cls"].value
        self.freq = params["freq_bias"].value
        self.C = C

    def probs(self, actions: np.ndarray) -> np.ndarray:
        """actions (K, n) -> predicate distributions (K, p, R)."""
        actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
        a_src = actions[:, self.src]
        a_dst = actions[:, self.dst]
        fx = self.subj_part[self.src, a_src] + self.obj_part[self.dst, a_dst]  # (K, p, 2z)
        fy = self.fy[None]
        fused = np.maximum(fx + fy, 0.0) - (fx - fy) ** 2
        logits = fused @ self.W_cls + self.freq[a_src, a_dst]
        return _softmax_rows(logits)


# ----------------------------------------------------------------- decoding


@dataclass
class Decoded:
    actions: np.ndarray  # (n,)
    agent_probs: np.ndarray  # (n, C)
    pair_probs: np.ndarray  # (p, R)
    graph: SceneGraph


def assemble_graph(
    actions: np.ndarray,
    confidences: np.ndarray,
    pair_probs: np.ndarray,
    boxes: Sequence[Box] | None = None,
) -> SceneGraph:
    """Predicted graph with one triplet per ordered pair and non-background predicate.

    Triplet score is subject confidence x object confidence x predicate probability.
    """
    n = len(actions)
    boxes = boxes if boxes is not None else [UNIT_BOX] * n
    entities = tuple(Entity(int(a), boxes[i], float(confidences[i])) for i, a in enumerate(actions))
    triplets = []
    for k, (i, j) in enumerate(ordered_pairs(n)):
        base = confidences[i] * confidences[j]
        for r in range(1, pair_probs.shape[1]):
            triplets.append(Triplet(i, j, r, float(base * pair_probs[k, r])))
    return SceneGraph(entities, tuple(triplets))


def greedy_actions(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=1)  # ties resolve to the lowest index


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One category per row drawn by inverse CDF from ``rng``."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def decode_graph(
    state: AgentState,
    params: ModelParameters,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    scene: int = 0,
    boxes: Sequence[Box] | None = None,
    actions: np.ndarray | None = None,
) -> Decoded:
    """Pick categories for one scene of the batch, then predicates for its pairs.

    ``actions`` overrides the choice (ground-truth categories for PredCls);
    those agents then report confidence 1.
    """
    b = state.batch
    ag = b.agents(scene)
    probs = state.probs[ag]
    if actions is not None:
        acts = np.asarray(actions, dtype=np.int64)
        conf = np.ones(len(acts))
    else:
        if mode == "greedy":
            acts = greedy_actions(probs)
        elif mode == "sample":
            if rng is None:
                raise ValueError("sampling needs a random generator")
            acts = sample_actions(probs, rng)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        conf = probs[np.arange(len(acts)), acts]
    pair_probs = RelationCache(state, params, scene).probs(acts[None])[0]
    return Decoded(acts, probs, pair_probs, assemble_graph(acts, conf, pair_probs, boxes))
