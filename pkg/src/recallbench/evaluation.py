"""Accuracy, per-class recovery, confusion matrices and ULM/RCM deltas."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import LineageError
from .model import Checkpoint, predict_labels

SPLITS = ("test", "forget")


def _labels_for(model, dataset):
    if isinstance(model, Checkpoint):
        model = model.to_classifier()
    if model.class_count != dataset.class_count:
        raise ValueError(f"model has {model.class_count} classes, dataset {dataset.class_count}")
    return predict_labels(model, dataset.images)


def accuracy(model, dataset):
    if len(dataset) == 0:
        raise ValueError(f"cannot compute accuracy on empty dataset {dataset.name!r}")
    return float((_labels_for(model, dataset) == dataset.labels).mean())


def _per_class(pred, labels, classes):
    out = {}
    for c in classes:
        sel = labels == c
        out[int(c)] = float((pred[sel] == c).mean()) if sel.any() else None
    return out


def per_class_accuracy(model, dataset, classes):
    """Accuracy restricted to each listed class; absent classes map to ``None``."""
    return _per_class(_labels_for(model, dataset), dataset.labels, classes)


def _confusion(pred, labels, class_count):
    counts = np.zeros((class_count, class_count))
    np.add.at(counts, (labels, pred), 1.0)
    support = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, support, out=np.zeros_like(counts), where=support > 0)


def confusion_matrix(model, dataset):
    """Row-normalised confusion: entry (i, j) is the share of class-i samples predicted j."""
    return _confusion(_labels_for(model, dataset), dataset.labels, dataset.class_count)


@dataclass
class SplitMetrics:
    acc: float
    per_class: dict
    confusion: np.ndarray


@dataclass
class MetricsReport:
    role: str
    splits: dict
    provenance: dict = field(default_factory=dict)
    unlearned: bool = None

    @property
    def acc_ts(self):
        return self.splits["test"].acc

    @property
    def acc_f(self):
        return self.splits["forget"].acc

    @property
    def per_class_acc(self):
        return self.splits["forget"].per_class

    @property
    def confusion(self):
        return self.splits["forget"].confusion

    def to_records(self):
        """One ``metrics.json`` record per split."""
        records = []
        for split, m in self.splits.items():
            records.append({
                "role": self.role,
                "split": split,
                "acc": m.acc,
                "per_class": {str(k): v for k, v in m.per_class.items()},
                "confusion": m.confusion.tolist(),
                "provenance": self.provenance,
                **({} if self.unlearned is None else {"unlearned": self.unlearned}),
            })
        return records

    @classmethod
    def from_records(cls, records):
        splits = {}
        for r in records:
            splits[r["split"]] = SplitMetrics(r["acc"], {int(k): v for k, v in r["per_class"].items()},
                                              np.asarray(r["confusion"], dtype=float))
        first = records[0]
        return cls(first["role"], splits, first.get("provenance", {}), first.get("unlearned"))


def evaluate(model, bundle, role=None, provenance=None):
    """Metrics of ``model`` on the bundle's test and forget splits.

    Per-class accuracies cover the forgotten classes only.
    """
    if isinstance(model, Checkpoint):
        role = role or model.role
        provenance = {**model.provenance, **(provenance or {})}
        model = model.to_classifier()
    classes = bundle.spec.forget_classes
    splits = {}
    for name, ds in (("test", bundle.test), ("forget", bundle.forget)):
        if len(ds) == 0:
            splits[name] = SplitMetrics(float("nan"), {int(c): None for c in classes},
                                        np.zeros((ds.class_count, ds.class_count)))
            continue
        pred = _labels_for(model, ds)
        splits[name] = SplitMetrics(float((pred == ds.labels).mean()), _per_class(pred, ds.labels, classes),
                                    _confusion(pred, ds.labels, ds.class_count))
    prov = dict(provenance or {})
    prov.setdefault("lineage", bundle.lineage())
    return MetricsReport(role or "model", splits, prov)


def _sub(a, b):
    return None if a is None or b is None else b - a


def delta_report(ulm_metrics, rcm_metrics):
    """Acc(RCM) - Acc(ULM) on every split plus per-class deltas."""
    la, lb = ulm_metrics.provenance.get("lineage"), rcm_metrics.provenance.get("lineage")
    if la is not None and lb is not None and la != lb:
        raise LineageError(f"reports come from different splits ({la} vs {lb})")
    if set(ulm_metrics.splits) != set(rcm_metrics.splits):
        raise LineageError("reports cover different splits")
    out = {}
    for split in ulm_metrics.splits:
        a, b = ulm_metrics.splits[split], rcm_metrics.splits[split]
        out[split] = {
            "acc_ulm": a.acc,
            "acc_rcm": b.acc,
            "delta": b.acc - a.acc,
            "per_class": {c: _sub(a.per_class.get(c), b.per_class.get(c)) for c in a.per_class},
        }
    return out


DELTA_COLUMNS = ("dataset", "method", "split", "acc_ulm", "acc_rcm", "delta")


def write_delta_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DELTA_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def plot_confusion(matrix, path, title=""):
    """Best-effort heatmap; needs matplotlib."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(matrix, vmin=0, vmax=1, cmap="Blues")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
