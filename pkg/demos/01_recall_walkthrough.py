"""Walk through one membership recall attack by hand, without the pipeline.

Train a small CNN on four Gaussian blob classes, make it forget half of
class 0 with random-label fine-tuning, then let a student recover the
forgotten labels from the unlearned model alone.

    python demos/01_recall_walkthrough.py [--open]
"""
import argparse

from recallbench import (AttackConfig, SplitSpec, TeacherAccess, TrainConfig, UnlearnConfig, evaluate,
                         load_dataset, make_splits, run_mra, train_trm, unlearn)

parser = argparse.ArgumentParser()
parser.add_argument("--open", action="store_true", help="white-box teacher (refined during recall)")
args = parser.parse_args()

train, test = load_dataset("blobs-c4-n200-s0"), load_dataset("blobs-c4-n100-s1")
bundle = make_splits(train, test, SplitSpec([0], 0.5, seed=0))
print(f"train {len(bundle.train)}  forget {len(bundle.forget)}  test {len(bundle.test)}")

trm = train_trm(bundle, "smallcnn", TrainConfig(epochs=20, width=32, seed=1))
ulm = unlearn(trm, bundle, UnlearnConfig("RL", epochs=10, lr=3e-5, seed=2))
for name, ckpt in (("TRM", trm), ("ULM", ulm)):
    r = evaluate(ckpt, bundle)
    print(f"{name}: test {r.acc_ts:.3f}  forget {r.acc_f:.3f}")

# The attacker sees only unlabeled images: test set plus the forgotten instances.
images = bundle.prediction.images
if args.open:
    cfg = AttackConfig(mode="open", lr_teacher=1e-3, lr_student=2e-3, topk_fraction=0.05,
                       outer_epochs=40, batch_size=64, seed=3)
else:
    cfg = AttackConfig(lr_student=2e-3, topk_fraction=0.6, outer_epochs=40, batch_size=64, seed=3)
teacher = TeacherAccess.from_checkpoint(ulm, cfg.mode, cfg.lr_teacher)


def progress(record, model):
    if record["phase"] == "recall_student" and record["outer_epoch"] % 10 == 0:
        print(f"  outer epoch {record['outer_epoch']:2d}  loss {record['loss']:.3f}")
    return {}


result = run_mra(teacher, "smallcnn", images, cfg, student_options={"width": 32}, monitor=progress)
rcm = evaluate(result.rcm, bundle)
print(f"RCM ({cfg.mode}): test {rcm.acc_ts:.3f}  forget {rcm.acc_f:.3f}")
if not args.open:
    teacher.assert_unchanged()
    print("closed-source teacher untouched")
