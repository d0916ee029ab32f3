"""Command-line entry point: ``python -m cmat <command> ...``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, data
from . import autodiff as ad
from .checkpoint import CheckpointError
from .data import DataError, WorldSpec
from .experiments import AXES, run_ablation
from .metrics import ConfigError, RewardSpec
from .model import ModelParameters, SceneInput, make_batch, forward, relation_logits
from .training import (
    BASELINES,
    NumericalError,
    RunLog,
    TrainConfig,
    dump_record,
    evaluate,
    expected_baseline_contribution,
    pretrain,
    train_rl,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # file name -> sha256, filled on completion
    code_version: str = __version__
    status: str = "running"
    started: str = field(default_factory=_now)
    finished: str | None = None

    def write(self, path: Path):
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def complete(self, path: Path, outputs):
        self.outputs = {Path(p).name: sha256(p) for p in outputs}
        self.status = "complete"
        self.finished = _now()
        self.write(path)


def verify_against_manifest(path: Path):
    """If ``path`` was produced by a completed run, its digest must still match."""
    manifest = path.parent / "manifest.json"
    if not manifest.exists():
        return
    recorded = json.loads(manifest.read_text(encoding="utf-8"))
    if recorded.get("status") != "complete":
        raise DataError(f"{path}: producing run in {manifest} did not complete")
    digest = recorded.get("outputs", {}).get(path.name)
    if digest is not None and digest != sha256(path):
        raise DataError(f"{path}: digest differs from {manifest}")


def prepare_out(out: Path, force: bool, names) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / n for n in names]
    existing = [p for p in paths + [out / "manifest.json"] if p.exists()]
    if existing and not force:
        raise UsageError(f"{existing[0]} exists; pass --force to overwrite")
    for p in existing:
        p.unlink()
    return paths


# ------------------------------------------------------------------ config


def load_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a flat JSON object")
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key] = value
    for key in ("seed", "threads", "steps", "baseline", "reward", "cb_budget", "alpha", "pretrain_iters", "rl_iters"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    if getattr(args, "constraint", None) is not None:
        values["constraint"] = args.constraint == "on"
    return TrainConfig.from_dict(values)


def load_corpus(directory, splits=SPLITS):
    directory = Path(directory)
    vocab_path = directory / "vocab.json"
    if not vocab_path.exists():
        raise DataError(f"{vocab_path} not found")
    vocab = data.load_vocab(vocab_path)
    inputs = {str(vocab_path): sha256(vocab_path)}
    parts = {}
    for name in splits:
        path = directory / f"{name}.jsonl"
        if not path.exists():
            raise DataError(f"{path} not found")
        parts[name] = data.load(path, vocab)
        inputs[str(path)] = sha256(path)
    return vocab, parts, inputs


class JsonlWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict):
        self.fh.write(dump_record(record) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be at least 1")
    fractions = tuple(float(x) for x in args.split.split(","))
    if len(fractions) != 3:
        raise UsageError("--split takes three comma-separated fractions")
    world = WorldSpec(
        num_objects=args.classes,
        num_predicates=args.predicates,
        mean_objects=args.mean_objects,
        max_objects=args.max_objects,
        corruption=args.corruption,
        seed=args.seed,
    )
    out = Path(args.out)
    names = [f"{s}.jsonl" for s in SPLITS] + ["vocab.json"]
    paths = prepare_out(out, args.force, names)
    snapshot = {k: v for k, v in asdict(world).items() if k not in ("cooccurrence", "predicate_table")}
    manifest = RunManifest("gen-data", {**snapshot, "scenes": args.scenes, "split": list(fractions)}, args.seed)
    manifest.write(out / "manifest.json")
    for name, part in zip(SPLITS, data.make_corpus(world, args.scenes, fractions)):
        data.save(part, out / f"{name}.jsonl")
    data.save_vocab(world.vocab, out / "vocab.json")
    manifest.complete(out / "manifest.json", paths)
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def _train_command(args, stage: str) -> int:
    config = load_config(args)
    vocab, parts, inputs = load_corpus(args.data, ("train", "val"))
    out = Path(args.out)
    if stage == "rl":
        init = Path(args.init)
        if not init.exists():
            raise DataError(f"pretrained checkpoint {init} not found")
        verify_against_manifest(init)
        params, _ = checkpoint.load(init)
        if (params.dims.num_objects, params.dims.num_predicates) != (vocab.num_objects, vocab.num_predicates):
            raise DataError("checkpoint vocabulary sizes do not match the corpus")
        inputs[str(init)] = sha256(init)
    paths = prepare_out(out, args.force, ["checkpoint.bin", "metrics.jsonl", "timing.jsonl"])
    manifest = RunManifest("pretrain" if stage == "pretrain" else "train-rl", config.to_dict(), config.seed, inputs)
    manifest.write(out / "manifest.json")
    if stage == "pretrain":
        params = ModelParameters.init(config.dims(vocab.num_objects, vocab.num_predicates), config.seed)
    metrics, timing = JsonlWriter(paths[1]), JsonlWriter(paths[2])
    log = RunLog(metrics, timing)
    try:
        run = pretrain if stage == "pretrain" else train_rl
        run(params, parts["train"], config, parts["val"], log)
    except NumericalError as exc:
        (out / "numerical_dump.json").write_text(json.dumps(exc.dump, indent=1, default=str) + "\n")
        raise
    finally:
        metrics.close()
        timing.close()
    checkpoint.save(params, paths[0], config.steps, {"stage": stage, "seed": config.seed})
    manifest.complete(out / "manifest.json", paths)
    final = log.records[-1] if log.records else {}
    print(f"{stage}: {len(log.records)} iterations, val {final.get('val', float('nan')):.4f} -> {paths[0]}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train_command(args, "pretrain")


def cmd_train_rl(args) -> int:
    return _train_command(args, "rl")


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found")
    params, manifest = checkpoint.load(ckpt)
    vocab, parts, inputs = load_corpus(args.data, (args.split,))
    if (params.dims.num_objects, params.dims.num_predicates) != (vocab.num_objects, vocab.num_predicates):
        raise DataError("checkpoint vocabulary sizes do not match the corpus")
    config = TrainConfig(steps=manifest["steps"], constraint=args.constraint == "on")
    specs = [RewardSpec.parse(m, config.constraint, config.iou_threshold) for m in args.metric]
    rows = []
    for spec in specs:
        value = evaluate(params, parts[args.split], config, args.task, spec)
        rows.append(
            {
                "task": args.task,
                "metric": spec.name,
                "constraint": config.constraint,
                "split": args.split,
                "scenes": len(parts[args.split]),
                "value": value,
            }
        )
    print(f"{'task':<8} {'metric':<12} {'constraint':<10} value")
    for r in rows:
        print(f"{r['task']:<8} {r['metric']:<12} {'on' if r['constraint'] else 'off':<10} {r['value']:.4f}")
    if args.out:
        Path(args.out).write_text("".join(dump_record(r) + "\n" for r in rows), encoding="utf-8")
    return EXIT_OK


def gradcheck_instance(config: TrainConfig, agents: int, classes: int, predicates: int, seed: int):
    rng = np.random.default_rng(seed)
    dims = config.dims(classes, predicates)
    params = ModelParameters.init(dims, seed)
    for t in params.values():
        t.value += rng.normal(scale=0.05, size=t.shape)
    scene = SceneInput(
        rng.normal(size=(agents, dims.feat)),
        rng.normal(size=(agents, classes)),
        rng.normal(size=(agents * (agents - 1), dims.feat)),
    )
    return params, scene, rng


def full_model_gradcheck(config: TrainConfig, agents=3, classes=4, predicates=3, seed=0, step=1e-4) -> float:
    """Max relative error of tape gradients against central differences for every parameter."""
    params, scene, rng = gradcheck_instance(config, agents, classes, predicates, seed)
    acts = rng.integers(0, classes, agents)
    targets = rng.integers(0, predicates, agents * (agents - 1))

    def loss():
        state = forward(make_batch([scene], params.dims), params, config.steps)
        obj = ad.total(ad.pick(ad.log_softmax(state.s), acts))
        rel = ad.total(ad.pick(ad.log_softmax(relation_logits(state, acts, params)), targets))
        return ad.scale(ad.add(obj, rel), -1.0)

    return ad.finite_diff_check(loss, params.values(), step)


def lemma_residual(config: TrainConfig, agents=3, classes=4, predicates=3, seed=0, cap=4096) -> tuple[float, float]:
    """Norm of the expected counterfactual-baseline gradient, and the scale it is measured against."""
    params, scene, rng = gradcheck_instance(config, agents, classes, predicates, seed)
    table = {}

    def reward_fn(acts):
        return table.setdefault(tuple(int(a) for a in acts), float(rng.random()))

    with ad.recording():
        state = forward(make_batch([scene], params.dims), params, config.steps)
        grads, scale = expected_baseline_contribution(state, params, reward_fn, cap=cap)
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads)), scale


def cmd_gradcheck(args) -> int:
    config = load_config(args)
    seed = config.seed
    err = full_model_gradcheck(config, args.agents, args.classes, args.predicates, seed)
    agents = args.agents
    while args.classes**agents > args.cap and agents > 1:
        agents -= 1
    if agents != args.agents:
        print(f"note: {args.classes}^{args.agents} labellings exceed the cap; lemma checked with {agents} agents")
    norm, scale = lemma_residual(config, agents, args.classes, args.predicates, seed, args.cap)
    relative = norm / scale if scale > 0 else norm
    print(f"gradient max relative error {err:.3e}")
    print(f"baseline lemma residual {norm:.3e} (relative {relative:.3e})")
    ok = err < 1e-4 and relative <= 1e-10
    print("ok" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_ablate(args) -> int:
    config = load_config(args)
    vocab, parts, inputs = load_corpus(args.data, ("train", "val"))
    out = Path(args.out)
    paths = prepare_out(out, args.force, ["summary.json", "cells.jsonl"])
    manifest = RunManifest("ablate", {**config.to_dict(), "axis": args.axis, "seeds": args.seeds}, config.seed, inputs)
    manifest.write(out / "manifest.json")
    cells = JsonlWriter(paths[1])
    start = time.perf_counter()

    def progress(axis, column, seed, value):
        cells({"axis": axis, "column": str(column), "seed": seed, "value": value})
        print(f"  seed {seed} {column}: {value:.4f} ({time.perf_counter() - start:.0f}s)", flush=True)

    seeds = range(config.seed, config.seed + args.seeds)
    try:
        result = run_ablation(
            args.axis, config, parts["train"], parts["val"], vocab.num_objects, vocab.num_predicates, seeds,
            args.metric, progress,
        )
    finally:
        cells.close()
    paths[0].write_text(json.dumps(result.summary(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    manifest.complete(out / "manifest.json", paths)
    print(result.table())
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _reward(value: str) -> str:
    try:
        RewardSpec.parse(value)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(p, training=True):
        p.add_argument("--config", help="flat JSON object of training options")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        if training:
            p.add_argument("--threads", type=int)
            p.add_argument("--steps", type=int, help="communication rounds")
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=data.DEFAULT_SCENES)
    p.add_argument("--classes", type=int, default=WorldSpec.num_objects, help="object categories including background")
    p.add_argument("--predicates", type=int, default=WorldSpec.num_predicates, help="predicates including no-relation")
    p.add_argument("--mean-objects", type=float, default=WorldSpec.mean_objects)
    p.add_argument("--max-objects", type=int, default=WorldSpec.max_objects)
    p.add_argument("--corruption", type=float, default=WorldSpec.corruption)
    p.add_argument("--split", default=",".join(map(str, data.DEFAULT_SPLIT)), help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("pretrain", help="cross-entropy pretraining")
    config_flags(p)
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-iters", dest="pretrain_iters", type=int)
    p.set_defaults(run=cmd_pretrain)

    p = sub.add_parser("train-rl", help="policy-gradient fine-tuning from a pretrained checkpoint")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True, help="pretrained checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=BASELINES)
    p.add_argument("--reward", type=_reward, help="recall@K or spice@K")
    p.add_argument("--cb-budget", dest="cb_budget", type=int, help="0 sums over every category")
    p.add_argument("--alpha", type=float)
    p.add_argument("--rl-iters", dest="rl_iters", type=int)
    p.set_defaults(run=cmd_train_rl)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--task", choices=("predcls", "sgcls"), default="sgcls")
    p.add_argument("--metric", type=_reward, action="append", help="repeatable; default recall@20")
    p.add_argument("--constraint", choices=("on", "off"), default="on")
    p.add_argument("--out", help="write the report as JSON lines")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference and baseline-lemma checks")
    config_flags(p, training=False)
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--predicates", type=int, default=3)
    p.add_argument("--steps", type=int, default=2, help="communication rounds")
    p.add_argument("--cap", type=int, default=4096, help="largest enumeration for the lemma check")
    p.set_defaults(run=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one axis over several seeds")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", choices=sorted(AXES), required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--metric", type=_reward, default="recall@20")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) == "eval" and not args.metric:
            args.metric = ["recall@20"]
        return args.run(args)
    except (UsageError, ConfigError) as exc:
        print(f"cmat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"cmat: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError) as exc:
        print(f"cmat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
