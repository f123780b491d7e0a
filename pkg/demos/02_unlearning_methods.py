"""Compare the six unlearning methods on whole-class forgetting.

Runs configs/desk-unlearn.json through the pipeline and prints forget and
test accuracy per method. GA and FF reach low forget accuracy only by
wrecking the model, which shows up as test accuracy near chance (0.25).

    python demos/02_unlearning_methods.py [--seed N] [--out DIR]
"""
import argparse
import tempfile
from pathlib import Path

from recallbench.pipeline import read_summary, run_experiment

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default=None)
args = parser.parse_args()

config = Path(__file__).resolve().parent.parent / "configs" / "desk-unlearn.json"
exp = run_experiment(config, root=args.out or tempfile.mkdtemp(), seed=args.seed)
rows = read_summary(exp.dir / "summary.csv")

print(f"{'method':8s} {'forget':>7s} {'test':>7s}")
for method in dict.fromkeys(r["method"] for r in rows):
    acc = {r["split"]: float(r["acc_ulm"]) for r in rows if r["method"] == method}
    print(f"{method:8s} {acc['forget']:7.3f} {acc['test']:7.3f}")
print(f"TRM      {float(rows[1]['acc_trm']):7.3f} {float(rows[0]['acc_trm']):7.3f}")
print("artifacts in", exp.dir)
