"""Baseline, reward and depth ablations on the default synthetic corpus, printed as tables.

Usage: python scripts/ablation_tables.py [--config configs/ablation.json] [--seeds 5] [--out tables.json]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from cmat.data import WorldSpec, make_corpus
from cmat.experiments import run_suite
from cmat.training import TrainConfig

ROOT = Path(__file__).resolve().parent.parent

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--config", default=str(ROOT / "configs" / "ablation.json"))
parser.add_argument("--seeds", type=int, default=5)
parser.add_argument("--metric", default="recall@20")
parser.add_argument("--out", help="write summaries as JSON")
args = parser.parse_args()

config = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
world = WorldSpec()
train, val, _ = make_corpus(world)


def progress(axis, column, seed, value):
    print(f"  seed {seed} {axis}/{column}: {value:.4f}", flush=True)


start = time.perf_counter()
tables = run_suite(config, train, val, world.num_objects, world.num_predicates, range(args.seeds), args.metric, progress)
print(f"\nsuite finished in {time.perf_counter() - start:.0f}s")

for axis, result in tables.items():
    print(f"\n== {axis}")
    print(result.table())
    first = result.columns[0]
    for column in result.columns[1:]:
        diff = np.array(result.scores[column]) - np.array(result.scores[first])
        print(f"  {column} - {first}: {diff.mean():+.4f} (pooled SE {result.pooled_stderr(column, first):.4f})")

if args.out:
    Path(args.out).write_text(json.dumps([t.summary() for t in tables.values()], indent=1) + "\n")
