"""Ablation of the attack: distillation only, plus student recall, plus teacher recall.

Runs configs/desk-recall.json for a few seeds and prints the mean forget and
test accuracy of each recalled model next to the unlearned model it started from.

    python demos/03_ablation.py [--seeds 0 1 2] [--jobs 2]
"""
import argparse
import tempfile
from pathlib import Path

from recallbench.pipeline import read_summary, run_experiment, summary_means

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
parser.add_argument("--jobs", type=int, default=1)
args = parser.parse_args()

config = Path(__file__).resolve().parent.parent / "configs" / "desk-recall.json"
root = Path(tempfile.mkdtemp())
runs = [run_experiment(config, root=root / f"seed{s}", seed=s, jobs=args.jobs) for s in args.seeds]
summaries = [read_summary(exp.dir / "summary.csv") for exp in runs]

variants = ("DST", "DST+STU", "DST+STU+TCH")
ulm_f = summary_means(summaries, "RL", variants[0], "forget", "acc_ulm")
ulm_ts = summary_means(summaries, "RL", variants[0], "test", "acc_ulm")
print(f"{'model':12s} {'forget':>7s} {'test':>7s}")
print(f"{'ULM':12s} {ulm_f:7.3f} {ulm_ts:7.3f}")
for v in variants:
    f = summary_means(summaries, "RL", v, "forget", "acc_rcm")
    ts = summary_means(summaries, "RL", v, "test", "acc_rcm")
    print(f"{v:12s} {f:7.3f} {ts:7.3f}")
