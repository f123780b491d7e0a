"""Training the original model (TRM) on the full training split."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .model import Checkpoint, Classifier, gradient_step, make_optimizer, one_hot, predict_labels
from .seeding import rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adamw"
    seed: int = 0
    width: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def run_epoch(model, optimizer, images, targets, batch_size, order, ascent=False, penalty=None,
              after_step=None):
    """One pass over ``images`` in the given order; returns the mean batch loss."""
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        losses.append(gradient_step(model, optimizer, images[idx], targets[idx],
                                    ascent=ascent, penalty=penalty))
        if after_step is not None:
            after_step()
    return float(np.mean(losses)) if losses else 0.0


def accuracy_of(model, dataset):
    if len(dataset) == 0:
        return float("nan")
    return float((predict_labels(model, dataset.images) == dataset.labels).mean())


def fit(model, dataset, cfg, optimizer=None, eval_set=None, on_epoch=None):
    """Fixed-epoch supervised training with a (seed, epoch)-keyed shuffle."""
    optimizer = optimizer or make_optimizer(model, cfg.optimizer, cfg.lr)
    targets = one_hot(dataset.labels, dataset.class_count)
    for epoch in range(1, cfg.epochs + 1):
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(dataset))
        loss = run_epoch(model, optimizer, dataset.images, targets, cfg.batch_size, order)
        record = {"epoch": epoch, "train_loss": loss, "train_acc": accuracy_of(model, dataset)}
        if eval_set is not None:
            record["test_acc"] = accuracy_of(model, eval_set)
        log.debug("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
    return model


def train_trm(bundle, arch_id, cfg, metrics_path=None):
    """Train the original model on ``bundle.train`` and return it as a TRM checkpoint.

    With ``metrics_path`` set, one JSON line per epoch is written:
    ``{epoch, train_loss, train_acc, test_acc}``.
    """
    if len(bundle.train) == 0:
        raise ConfigError("training split is empty")
    model = Classifier(arch_id, bundle.class_count, bundle.train.image_shape, seed=cfg.seed,
                       **({} if arch_id == "linear" else {"width": cfg.width}))
    records = []
    fit(model, bundle.train, cfg, eval_set=bundle.test, on_epoch=records.append)
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return Checkpoint.from_classifier(model, "TRM", method="train", config=cfg.digest(),
                                      seed=cfg.seed, epoch=cfg.epochs)
