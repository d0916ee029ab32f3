"""Exact vs truncated counterfactual baselines: wall time per scene and mean gap."""
import argparse

from cmat.data import WorldSpec
from cmat.experiments import time_counterfactual_baselines
from cmat.training import TrainConfig

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--classes", type=int, default=31)
parser.add_argument("--budgets", default="1,2,4,8")
parser.add_argument("--scenes", type=int, default=40)
args = parser.parse_args()

world = WorldSpec(num_objects=args.classes)
print(f"{'budget':>6}  {'exact ms':>9}  {'trunc ms':>9}  {'speedup':>7}  mean |diff|")
for budget in map(int, args.budgets.split(",")):
    t = time_counterfactual_baselines(world, TrainConfig(), budget, args.scenes)
    print(f"{budget:6d}  {1e3 * t.exact_seconds:9.2f}  {1e3 * t.truncated_seconds:9.2f}  {t.speedup:7.1f}  {t.mean_abs_diff:.4f}")
