"""Ablation sweeps (baseline type, reward choice, communication depth) and CB timing."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SceneRecord, WorldSpec, generate
from .metrics import ConfigError, RewardSpec
from .model import ModelParameters, forward, make_batch, sample_actions
from .training import TrainConfig, counterfactual_baselines, evaluate, pretrain, scene_views, train_rl

AXES = {
    "baseline": ("xe", "ma", "sc", "cf", "none"),
    "reward": ("xe", "recall@20", "spice@20"),
    "steps": (2, 3, 4, 5),
}


@dataclass
class Ablation:
    axis: str
    columns: tuple
    scores: dict = field(default_factory=dict)  # column -> per-seed validation scores
    seconds: float = 0.0  # wall time of the runs this table needed

    def add(self, column, value: float):
        self.scores.setdefault(column, []).append(float(value))

    def mean(self, column) -> float:
        return float(np.mean(self.scores[column]))

    def std(self, column) -> float:
        v = self.scores[column]
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def stderr(self, column) -> float:
        return self.std(column) / math.sqrt(len(self.scores[column]))

    def pooled_stderr(self, a, b) -> float:
        return math.sqrt(self.stderr(a) ** 2 + self.stderr(b) ** 2)

    def summary(self) -> dict:
        return {
            "axis": self.axis,
            "seconds": self.seconds,
            "cells": [
                {
                    "column": str(c),
                    "mean": self.mean(c),
                    "std": self.std(c),
                    "stderr": self.stderr(c),
                    "scores": self.scores[c],
                }
                for c in self.columns
                if c in self.scores
            ],
        }

    def table(self) -> str:
        rows = [f"{'column':>10}  {'mean':>8}  {'std':>8}  seeds"]
        for c in self.columns:
            if c in self.scores:
                rows.append(f"{str(c):>10}  {self.mean(c):8.4f}  {self.std(c):8.4f}  {len(self.scores[c])}")
        return "\n".join(rows)


def run_ablation(
    axis: str,
    config: TrainConfig,
    train_records: Sequence[SceneRecord],
    val_records: Sequence[SceneRecord],
    num_objects: int,
    num_predicates: int,
    seeds: Sequence[int],
    metric: str = "recall@20",
    progress: Callable[[str, object, int, float], None] | None = None,
) -> Ablation:
    """Train every cell of ``axis`` for each seed; score on ``val_records``.

    The ``xe`` column is the pretrained checkpoint every RL cell of the same
    seed starts from. The steps axis pretrains separately per depth.
    """
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    spec = RewardSpec.parse(metric, config.constraint, config.iou_threshold)
    result = Ablation(axis, AXES[axis])

    def record(column, seed, params, cfg):
        value = evaluate(params, val_records, cfg, spec=spec)
        result.add(column, value)
        if progress:
            progress(axis, column, seed, value)

    dims = config.dims(num_objects, num_predicates)
    for seed in seeds:
        base = config.replace(seed=seed)
        if axis == "steps":
            for steps in AXES["steps"]:
                cfg = base.replace(steps=steps)
                params = ModelParameters.init(dims, seed)
                pretrain(params, train_records, cfg)
                train_rl(params, train_records, cfg)
                record(steps, seed, params, cfg)
            continue
        stage1 = ModelParameters.init(dims, seed)
        pretrain(stage1, train_records, base)
        record("xe", seed, stage1, base)
        for column in AXES[axis][1:]:
            cfg = base.replace(baseline=column) if axis == "baseline" else base.replace(reward=column)
            params = stage1.copy()
            train_rl(params, train_records, cfg)
            record(column, seed, params, cfg)
    return result


def run_suite(
    config: TrainConfig,
    train_records: Sequence[SceneRecord],
    val_records: Sequence[SceneRecord],
    num_objects: int,
    num_predicates: int,
    seeds: Sequence[int],
    metric: str = "recall@20",
    progress: Callable[[str, object, int, float], None] | None = None,
) -> dict[str, Ablation]:
    """All three axes, sharing runs that coincide.

    Per seed: one pretrained checkpoint at ``config.steps`` feeds the XE
    column and every baseline/reward cell; the CF run with ``config.reward``
    fills both the baseline and reward tables and the matching depth cell.
    Only the other depths pretrain again. The ``none`` baseline is skipped.
    Shared runs are charged to the baseline table's ``seconds``.
    """
    spec = RewardSpec.parse(metric, config.constraint, config.iou_threshold)
    tables = {
        "baseline": Ablation("baseline", ("xe", "ma", "sc", "cf")),
        "reward": Ablation("reward", AXES["reward"]),
        "steps": Ablation("steps", AXES["steps"]),
    }
    dims = config.dims(num_objects, num_predicates)

    def score(params, cfg, seed, *cells):
        value = evaluate(params, val_records, cfg, spec=spec)
        for axis, column in cells:
            tables[axis].add(column, value)
            if progress:
                progress(axis, column, seed, value)

    for seed in seeds:
        clock = time.perf_counter()
        base = config.replace(seed=seed, baseline="cf")
        stage1 = ModelParameters.init(dims, seed)
        pretrain(stage1, train_records, base)
        score(stage1, base, seed, ("baseline", "xe"), ("reward", "xe"))
        for name in ("ma", "sc", "cf"):
            cfg = base.replace(baseline=name)
            params = stage1.copy()
            train_rl(params, train_records, cfg)
            cells = [("baseline", name)]
            if name == "cf" and base.reward in AXES["reward"]:
                cells.append(("reward", base.reward))
            if name == "cf" and base.steps in AXES["steps"]:
                cells.append(("steps", base.steps))
            score(params, cfg, seed, *cells)
        clock = _charge(tables["baseline"], clock)
        for reward in AXES["reward"][1:]:
            if reward != base.reward:
                cfg = base.replace(reward=reward)
                params = stage1.copy()
                train_rl(params, train_records, cfg)
                score(params, cfg, seed, ("reward", reward))
        clock = _charge(tables["reward"], clock)
        for steps in AXES["steps"]:
            if steps != base.steps:
                cfg = base.replace(steps=steps)
                params = ModelParameters.init(dims, seed)
                pretrain(params, train_records, cfg)
                train_rl(params, train_records, cfg)
                score(params, cfg, seed, ("steps", steps))
        _charge(tables["steps"], clock)
    return tables


def _charge(table: Ablation, since: float) -> float:
    now = time.perf_counter()
    table.seconds += now - since
    return now


@dataclass
class CBTiming:
    exact_seconds: float  # per scene
    truncated_seconds: float  # per scene
    mean_abs_diff: float
    scenes: int

    @property
    def speedup(self) -> float:
        return self.exact_seconds / self.truncated_seconds


def time_counterfactual_baselines(
    world: WorldSpec, config: TrainConfig, budget: int = 2, scenes: int = 40, seed: int = 0
) -> CBTiming:
    """Per-scene wall time of exact and truncated CB on one sampled labelling per scene."""
    spec = config.reward_spec
    records = generate(world, scenes)
    params = ModelParameters.init(config.dims(world.num_objects, world.num_predicates), seed)
    state = forward(make_batch([r.as_input() for r in records], params.dims), params, config.steps)
    views = scene_views(state, records, params, spec)
    rng = np.random.default_rng(seed)
    actions = [sample_actions(v.probs, rng) for v in views]
    elapsed = {}
    values = {}
    for mode, b in (("exact", 0), ("truncated", budget)):
        start = time.perf_counter()
        values[mode] = [counterfactual_baselines(v, a, spec, b) for v, a in zip(views, actions)]
        elapsed[mode] = (time.perf_counter() - start) / scenes
    diff = np.concatenate([np.abs(e - t) for e, t in zip(values["exact"], values["truncated"])])
    return CBTiming(elapsed["exact"], elapsed["truncated"], float(diff.mean()), scenes)
