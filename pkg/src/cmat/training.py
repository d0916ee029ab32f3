"""Two-stage training: cross-entropy pretraining, then multi-agent policy gradient.

The policy-gradient stage scores each sampled labelling with a graph-level
reward and credits agent i with ``R - b_i``, where ``b_i`` is one of

* ``cf``   counterfactual: expected reward when only agent i's label is
           re-drawn from its own policy, everyone else fixed;
* ``sc``   self-critical: reward of the greedy labelling;
* ``ma``   moving average of recent episode rewards;
* ``none`` zero (plain REINFORCE).
"""
from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SceneRecord
from .metrics import ConfigError, RewardSpec, TruthIndex, reward_from_arrays
from .model import (
    AgentState,
    Batch,
    Dims,
    ModelParameters,
    RelationCache,
    forward,
    greedy_actions,
    make_batch,
    relation_logits,
    sample_actions,
)

BASELINES = ("cf", "sc", "ma", "none")


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient; carries a diagnostic dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    hidden: int = 32
    feat: int = 16
    embed: int = 16
    rel: int = 16
    steps: int = 3  # communication rounds T
    alpha: float = 1.0
    entropy_coeff: float = 0.01
    baseline: str = "cf"
    cb_budget: int = 0  # 0 = sum over every category
    reward: str = "recall@20"
    constraint: bool = True
    iou_threshold: float = 0.5
    lr_pretrain: float = 0.05
    lr_rl: float = 0.02
    clip_norm: float = 5.0
    batch_size: int = 16
    shard_size: int = 16  # scenes per tape; fixes the gradient summation order
    pretrain_iters: int = 300
    rl_iters: int = 150
    eval_every: int = 0  # 0 = only at the end of each stage
    ma_window: int = 50
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.alpha < 0 or self.entropy_coeff < 0:
            raise ConfigError("alpha and entropy_coeff must be non-negative")
        if self.lr_pretrain <= 0 or self.lr_rl <= 0:
            raise ConfigError("learning rates must be positive")
        if self.cb_budget < 0:
            raise ConfigError("cb_budget must be >= 0")
        if self.steps < 1 or self.batch_size < 1 or self.shard_size < 1 or self.ma_window < 1:
            raise ConfigError("steps, batch_size, shard_size and ma_window must be >= 1")
        RewardSpec.parse(self.reward)

    @property
    def reward_spec(self) -> RewardSpec:
        return RewardSpec.parse(self.reward, self.constraint, self.iou_threshold)

    def dims(self, num_objects: int, num_predicates: int) -> Dims:
        return Dims(self.hidden, self.feat, self.embed, self.rel, num_objects, num_predicates)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                coerced[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "on", "yes")
            else:
                coerced[key] = type(default)(raw)
        return cls(**coerced)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


# ------------------------------------------------------------------ objective


def scene_xe(state: AgentState, records: Sequence[SceneRecord], params: ModelParameters) -> Tensor:
    """Sum over scenes of object XE plus relationship XE over all ordered pairs.

    The relation head is fed ground-truth categories; unannotated pairs are
    supervised towards no-relationship.
    """
    gt_objects = np.concatenate([r.categories for r in records])
    gt_pairs = np.concatenate([r.pair_targets() for r in records])
    logp = ad.log_softmax(state.s)
    obj_term = ad.total(ad.pick(logp, gt_objects))
    if len(gt_pairs):
        rel_logp = ad.log_softmax(relation_logits(state, gt_objects, params))
        rel_term = ad.total(ad.pick(rel_logp, gt_pairs))
        return ad.scale(ad.add(obj_term, rel_term), -1.0)
    return ad.scale(obj_term, -1.0)


def xe_objective(records: Sequence[SceneRecord], params: ModelParameters, steps: int) -> Tensor:
    batch = make_batch([r.as_input() for r in records], params.dims)
    return scene_xe(forward(batch, params, steps), records, params)


def entropy(state: AgentState) -> Tensor:
    """Total entropy of the agents' category distributions."""
    logp = ad.log_softmax(state.s)
    return ad.scale(ad.total(ad.mul(ad.softmax(state.s), logp)), -1.0)


# -------------------------------------------------------------- rewards / CB


@dataclass
class SceneView:
    """One scene of a forward pass, with what reward evaluation needs."""

    probs: np.ndarray
    cache: RelationCache
    truth: TruthIndex

    def reward(self, actions: np.ndarray, spec: RewardSpec, pair_probs: np.ndarray | None = None) -> float:
        if pair_probs is None:
            pair_probs = self.cache.probs(actions[None])[0]
        conf = self.probs[np.arange(len(actions)), actions]
        return reward_from_arrays(actions, conf, pair_probs, self.cache.src, self.cache.dst, self.truth, spec)


def scene_views(state: AgentState, records: Sequence[SceneRecord], params: ModelParameters, spec: RewardSpec):
    probs = state.probs
    b = state.batch
    return [
        SceneView(probs[b.agents(k)], RelationCache(state, params, k), TruthIndex(rec.truth, None, spec.iou_threshold))
        for k, rec in enumerate(records)
    ]


def episode_reward(view: SceneView, actions: np.ndarray, spec: RewardSpec) -> float:
    """Reward of sampled ``actions`` with greedy predicates from the relation head."""
    return view.reward(np.asarray(actions, dtype=np.int64), spec)


def candidate_set(probs_i: np.ndarray, budget: int) -> np.ndarray:
    """Categories summed over for one agent's counterfactual baseline.

    ``budget == 0`` means every category; otherwise the ``budget`` most likely
    non-background categories plus background.
    """
    C = len(probs_i)
    if budget > C:
        raise ConfigError(f"cb_budget {budget} exceeds the {C} categories")
    if budget == 0 or budget >= C - 1:
        return np.arange(C)
    order = np.argsort(-probs_i[1:], kind="stable")[:budget] + 1
    return np.concatenate([[0], np.sort(order)])


def counterfactual_baseline(view: SceneView, actions: np.ndarray, agent: int, spec: RewardSpec, budget: int = 0) -> float:
    """CB for a single agent; see :func:`counterfactual_baselines`."""
    return counterfactual_baselines(view, actions, spec, budget, agents=[agent])[0]


def counterfactual_baselines(
    view: SceneView,
    actions: np.ndarray,
    spec: RewardSpec,
    budget: int = 0,
    agents: Sequence[int] | None = None,
) -> np.ndarray:
    """CB_i = sum_{c in S_i} p_hat_i(c) * R(actions with agent i set to c).

    Predicates are recomputed for each counterfactual labelling. With a
    truncated candidate set S_i the probabilities are renormalised over S_i;
    the full set uses them as they are. Terms are added in category order.
    """
    actions = np.asarray(actions, dtype=np.int64)
    agents = range(len(actions)) if agents is None else agents
    rows, owners, weights = [], [], []
    for i in agents:
        cand = candidate_set(view.probs[i], budget)
        w = view.probs[i, cand]
        if len(cand) < len(view.probs[i]):
            w = w / w.sum()
        for c, wc in zip(cand, w):
            alt = actions.copy()
            alt[i] = c
            rows.append(alt)
            owners.append(i)
            weights.append(wc)
    alts = np.array(rows, dtype=np.int64)
    pair_probs = view.cache.probs(alts)
    values = np.array([view.reward(a, spec, pp) for a, pp in zip(alts, pair_probs)])
    totals = dict.fromkeys(agents, 0.0)
    for i, wc, value in zip(owners, weights, values):
        totals[i] += float(wc) * float(value)
    return np.array([totals[i] for i in agents])


def advantage(reward: float, baseline: float) -> float:
    return reward - baseline


def sc_baseline(view: SceneView, spec: RewardSpec) -> float:
    return view.reward(greedy_actions(view.probs), spec)


def ma_baseline(history: Sequence[float], window: int) -> float:
    if not history:
        return 0.0
    recent = list(history)[-window:]
    return float(sum(recent) / len(recent))


# ------------------------------------------------------------ gradient steps


def _grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def _check_finite(loss: float, grads: Sequence[np.ndarray], names: Sequence[str], context: dict):
    bad = [n for n, g in zip(names, grads) if not np.all(np.isfinite(g))]
    if not math.isfinite(loss) or bad:
        raise NumericalError(
            f"non-finite {'loss' if not math.isfinite(loss) else 'gradient'}",
            {**context, "loss": loss, "non_finite": bad},
        )


def apply_sgd(params: ModelParameters, grads: Sequence[np.ndarray], lr: float, clip_norm: float) -> float:
    """In-place SGD with global-norm clipping; returns the pre-clip norm."""
    norm = _grad_norm(grads)
    factor = lr * (clip_norm / norm if clip_norm > 0 and norm > clip_norm else 1.0)
    for t, g in zip(params.values(), grads):
        t.value -= factor * g
    return norm


def _shards(records: Sequence, size: int) -> list[Sequence]:
    return [records[k : k + size] for k in range(0, len(records), size)]


def _run_shards(fn, shards, threads: int):
    if threads > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, shards))
    return [fn(s) for s in shards]


def _sum_in_order(parts: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    total = [g.copy() for g in parts[0]]
    for part in parts[1:]:
        for acc, g in zip(total, part):
            acc += g
    return total


def xe_step(params: ModelParameters, records: Sequence[SceneRecord], config: TrainConfig) -> dict:
    """One supervised step on a batch; returns diagnostics."""
    scale = 1.0 / len(records)
    wrt = params.values()

    def shard_grads(shard):
        with ad.recording() as tape:
            loss = ad.scale(xe_objective(shard, params, config.steps), scale)
        g = tape.backward(loss, wrt=wrt)
        return float(loss.value), [g[id(p)] for p in wrt]

    results = _run_shards(shard_grads, _shards(records, config.shard_size), config.threads)
    loss = sum(r[0] for r in results)
    grads = _sum_in_order([r[1] for r in results])
    _check_finite(loss, grads, params.names(), {"stage": "pretrain"})
    norm = apply_sgd(params, grads, config.lr_pretrain, config.clip_norm)
    return {"loss": loss, "grad_norm": norm}


@dataclass
class GradSample:
    scene_id: int
    actions: np.ndarray
    reward: float
    baselines: np.ndarray
    advantages: np.ndarray


def scene_rng(seed: int, iteration: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, scene_id])


def rl_loss(
    params: ModelParameters,
    records: Sequence[SceneRecord],
    config: TrainConfig,
    iteration: int,
    history: Sequence[float],
    scale: float = 1.0,
) -> tuple[Tensor, list[GradSample], dict]:
    """Minimisation loss whose gradient is the negated ascent direction.

    ``-(sum_i A_i log p_i(v_i)) + alpha * XE - entropy_coeff * H``, scaled by
    ``scale``. Advantages enter as constants.
    """
    spec = config.reward_spec
    batch = make_batch([r.as_input() for r in records], params.dims)
    state = forward(batch, params, config.steps)
    views = scene_views(state, records, params, spec)
    ma_value = ma_baseline(history, config.ma_window)
    actions, advantages, samples = [], [], []
    for rec, view in zip(records, views):
        acts = sample_actions(view.probs, scene_rng(config.seed, iteration, rec.scene_id))
        R = episode_reward(view, acts, spec)
        n = len(acts)
        if config.baseline == "cf":
            base = counterfactual_baselines(view, acts, spec, config.cb_budget)
        elif config.baseline == "sc":
            base = np.full(n, sc_baseline(view, spec))
        elif config.baseline == "ma":
            base = np.full(n, ma_value)
        else:
            base = np.zeros(n)
        adv = R - base
        actions.append(acts)
        advantages.append(adv)
        samples.append(GradSample(rec.scene_id, acts, R, base, adv))
    acts = np.concatenate(actions)
    adv = np.concatenate(advantages)
    logp = ad.log_softmax(state.s)
    pg = ad.dot(ad.pick(logp, acts), Tensor(adv))
    loss = ad.scale(pg, -1.0)
    xe = None
    if config.alpha > 0:
        xe = scene_xe(state, records, params)
        loss = ad.add(loss, ad.scale(xe, config.alpha))
    ent = entropy(state)
    if config.entropy_coeff > 0:
        loss = ad.add(loss, ad.scale(ent, -config.entropy_coeff))
    diag = {"xe": float(xe.value) if xe is not None else 0.0, "entropy": float(ent.value)}
    return ad.scale(loss, scale), samples, diag


def policy_gradient_step(
    params: ModelParameters,
    records: Sequence[SceneRecord],
    config: TrainConfig,
    iteration: int,
    history: Sequence[float],
) -> tuple[dict, list[GradSample]]:
    scale = 1.0 / len(records)
    wrt = params.values()

    def shard_grads(shard):
        with ad.recording() as tape:
            loss, samples, diag = rl_loss(params, shard, config, iteration, history, scale)
        g = tape.backward(loss, wrt=wrt)
        return float(loss.value), [g[id(p)] for p in wrt], samples, diag

    results = _run_shards(shard_grads, _shards(records, config.shard_size), config.threads)
    loss = sum(r[0] for r in results)
    grads = _sum_in_order([r[1] for r in results])
    samples = [s for r in results for s in r[2]]
    rewards = np.array([s.reward for s in samples])
    cbs = np.concatenate([s.baselines for s in samples])
    _check_finite(
        loss,
        grads,
        params.names(),
        {"stage": "rl", "iteration": iteration, "rewards": rewards.tolist(), "baselines": cbs.tolist()},
    )
    norm = apply_sgd(params, grads, config.lr_rl, config.clip_norm)
    diag = {
        "loss": loss,
        "reward_mean": float(rewards.mean()),
        "reward_std": float(rewards.std()),
        "baseline_mean": float(cbs.mean()),
        "entropy": sum(r[3]["entropy"] for r in results) / len(records),
        "xe": sum(r[3]["xe"] for r in results) / len(records),
        "grad_norm": norm,
    }
    return diag, samples


# ------------------------------------------------------------- lemma oracle


def expected_baseline_contribution(
    state: AgentState,
    params: ModelParameters,
    reward_fn: Callable[[np.ndarray], float],
    scene: int = 0,
    cap: int = 4096,
) -> tuple[list[np.ndarray], float]:
    """Exact expected gradient contributed by counterfactual baselines.

    Enumerates every labelling of the other agents and returns
    ``sum_i sum_{V_-i} pi(V_-i) CB_i(V_-i) sum_{v} p_i(v) grad log p_i(v)``
    together with the scale ``sum |weight| * ||grad log p_i(v)||`` of the
    individual terms. ``state`` must have been produced under a tape that
    is still recording.
    """
    b = state.batch
    ag = b.agents(scene)
    probs = state.probs[ag]
    n, C = probs.shape
    if C**n > cap:
        raise ValueError(f"enumeration of {C}^{n} labellings exceeds cap {cap}")
    tape = ad.active_tape()
    if tape is None:
        raise ValueError("state must be computed while recording")
    coef = np.zeros((n, C))
    for i in range(n):
        others = [k for k in range(n) if k != i]
        expected_cb = 0.0
        for labels in itertools.product(range(C), repeat=n - 1):
            acts = np.zeros(n, dtype=np.int64)
            acts[others] = labels
            weight = float(np.prod(probs[others, list(labels)])) if others else 1.0
            cb = 0.0
            for c in range(C):
                acts[i] = c
                cb += probs[i, c] * reward_fn(acts.copy())
            expected_cb += weight * cb
        coef[i] = probs[i] * expected_cb
    mark = len(tape.nodes)
    logp = ad.log_softmax(state.s)
    rows = np.arange(ag.start, ag.stop)
    wrt = params.values()
    full = np.zeros((b.num_agents, C))
    full[rows] = coef
    target = ad.total(ad.mul(logp, Tensor(full)))
    grads = tape.backward(target, wrt=wrt)
    result = [grads[id(p)] for p in wrt]
    scale = 0.0
    for i in range(n):
        for c in range(C):
            if coef[i, c] == 0.0:
                continue
            sel = np.zeros((b.num_agents, C))
            sel[rows[i], c] = 1.0
            term = ad.total(ad.mul(logp, Tensor(sel)))
            g = tape.backward(term, wrt=wrt)
            scale += abs(coef[i, c]) * _grad_norm([g[id(p)] for p in wrt])
    del tape.nodes[mark:]
    return result, scale


# ----------------------------------------------------------------- drivers


def evaluate(
    params: ModelParameters,
    records: Sequence[SceneRecord],
    config: TrainConfig,
    task: str = "sgcls",
    spec: RewardSpec | None = None,
    chunk: int = 64,
) -> float:
    """Mean graph metric over scenes; ``predcls`` labels agents with ground truth."""
    if task not in ("sgcls", "predcls"):
        raise ConfigError(f"unknown task {task!r}")
    spec = spec or config.reward_spec
    scores = []
    for part in _shards(records, chunk):
        batch = make_batch([r.as_input() for r in part], params.dims)
        state = forward(batch, params, config.steps)
        for view, rec in zip(scene_views(state, part, params, spec), part):
            if task == "predcls":
                acts = rec.categories
                pp = view.cache.probs(acts[None])[0]
                conf = np.ones(len(acts))
                scores.append(
                    reward_from_arrays(acts, conf, pp, view.cache.src, view.cache.dst, view.truth, spec)
                )
            else:
                scores.append(view.reward(greedy_actions(view.probs), spec))
    return float(np.mean(scores))


def batch_order(count: int, batch_size: int, iterations: int, seed: int, stage: int):
    """Scene indices per iteration: reshuffled epochs from a seeded stream."""
    rng = np.random.default_rng([seed, 7, stage])
    pool: list[int] = []
    for _ in range(iterations):
        if len(pool) < batch_size:
            pool.extend(rng.permutation(count).tolist())
        yield sorted(pool[:batch_size])
        del pool[:batch_size]


@dataclass
class RunLog:
    """Collects per-iteration records; the writer gets deterministic content only."""

    writer: Callable[[dict], None] | None = None
    timing_writer: Callable[[dict], None] | None = None
    records: list[dict] = field(default_factory=list)

    def emit(self, record: dict, wall: float):
        self.records.append(record)
        if self.writer:
            self.writer(record)
        if self.timing_writer:
            self.timing_writer({"stage": record["stage"], "iteration": record["iteration"], "wall_time": wall})


def pretrain(params, train_records, config: TrainConfig, val_records=None, log: RunLog | None = None):
    log = log or RunLog()
    start = time.perf_counter()
    for it, idx in enumerate(batch_order(len(train_records), config.batch_size, config.pretrain_iters, config.seed, 1)):
        diag = xe_step(params, [train_records[k] for k in idx], config)
        rec = {"stage": "pretrain", "iteration": it, **diag}
        last = it == config.pretrain_iters - 1
        if val_records and ((config.eval_every and it % config.eval_every == 0) or last):
            rec["val"] = evaluate(params, val_records, config)
        log.emit(rec, time.perf_counter() - start)
    return params


def train_rl(params, train_records, config: TrainConfig, val_records=None, log: RunLog | None = None):
    log = log or RunLog()
    history: list[float] = []
    start = time.perf_counter()
    for it, idx in enumerate(batch_order(len(train_records), config.batch_size, config.rl_iters, config.seed, 2)):
        diag, samples = policy_gradient_step(params, [train_records[k] for k in idx], config, it, history)
        history.extend(s.reward for s in samples)
        rec = {"stage": "rl", "iteration": it, "baseline": config.baseline, **diag}
        last = it == config.rl_iters - 1
        if val_records and ((config.eval_every and it % config.eval_every == 0) or last):
            rec["val"] = evaluate(params, val_records, config)
        log.emit(rec, time.perf_counter() - start)
    return params


def train(config: TrainConfig, train_records, val_records=None, num_objects: int = 13, num_predicates: int = 7, log=None):
    """Both stages from a fresh initialisation; returns (pretrained copy, final params)."""
    params = ModelParameters.init(config.dims(num_objects, num_predicates), config.seed)
    pretrain(params, train_records, config, val_records, log)
    stage1 = params.copy()
    train_rl(params, train_records, config, val_records, log)
    return stage1, params


def dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))
