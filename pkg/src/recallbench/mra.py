"""Membership recall attack: recover forgotten class memberships from an unlearned model.

The attack alternates two phases for ``outer_epochs`` rounds:

1. Denoising distillation. The unlearned model (teacher) labels mixup-augmented
   prediction images. The student is trained on a per-sample blend of teacher
   and student soft labels; in the first round the teacher label is used as is.
2. Confident recall. Teacher and student predict the raw prediction images.
   Both outputs are Laplace-smoothed and multiplied elementwise. For every class,
   the top-K instances by joint probability get a smoothed hard label. The
   student is trained on this balanced set. When the teacher's parameters are
   available (open mode), a fresh confident set built with the updated student
   also refines the teacher.

Only prediction images and model outputs enter this module; ground-truth labels
never do.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import torch

from .errors import CapabilityError, ConfigError, ContractViolation, NumericError
from .model import Checkpoint, Classifier, gradient_step, make_optimizer, predict_soft
from .seeding import derive_seed, rng_for

MODES = ("closed", "open")


@dataclass(frozen=True)
class AttackConfig:
    image_mix_alpha: float = 0.2
    label_mix_alpha: float = 0.75
    laplace_gamma: float = 0.01
    label_smoothing: float = 0.05
    topk_fraction: float = 0.05
    outer_epochs: int = 10
    distill_epochs: int = 1
    recall_rounds: int = 1
    mode: str = "closed"
    student_recall: bool = True
    lr_student: float = 2e-4
    lr_teacher: float = None
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.image_mix_alpha <= 0 or self.label_mix_alpha <= 0:
            raise ConfigError("Beta shape parameters must be > 0")
        if self.laplace_gamma < 0:
            raise ConfigError("laplace_gamma must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0 < self.topk_fraction <= 1:
            raise ConfigError("topk_fraction must lie in (0, 1]")
        if min(self.outer_epochs, self.distill_epochs, self.recall_rounds) < 1:
            raise ConfigError("outer_epochs, distill_epochs and recall_rounds must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if (self.mode == "open") != (self.lr_teacher is not None):
            raise ConfigError("lr_teacher is required in open mode and meaningless in closed mode")
        if self.lr_student < 0 or (self.lr_teacher is not None and self.lr_teacher < 0):
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class TeacherAccess:
    """Capability wrapper around the unlearned model.

    A closed (black-box) teacher can only be queried: its parameters are frozen
    and can neither be updated nor exported. An open teacher additionally owns
    an AdamW optimiser for refinement.
    """

    def __init__(self, model, writable=False, lr=None):
        self._model = model
        self.writable = bool(writable)
        self._initial_checksum = model.checksum()
        if self.writable:
            if lr is None:
                raise ConfigError("an open teacher needs a learning rate")
            self._optimizer = make_optimizer(model, "adamw", lr)
        else:
            self._optimizer = None
            for p in model.parameters():
                p.requires_grad_(False)

    @classmethod
    def from_checkpoint(cls, ckpt, mode="closed", lr=None):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        return cls(ckpt.to_classifier(), writable=(mode == "open"), lr=lr)

    @property
    def class_count(self):
        return self._model.class_count

    def predict(self, images):
        return predict_soft(self._model, images)

    def checksum(self):
        return self._model.checksum()

    def update(self, images, targets):
        if not self.writable:
            raise CapabilityError("closed-source teacher cannot be updated")
        return gradient_step(self._model, self._optimizer, images, targets)

    def export(self):
        if not self.writable:
            raise CapabilityError("closed-source teacher parameters are not accessible")
        return self._model.clone()

    def assert_unchanged(self):
        if self.checksum() != self._initial_checksum:
            raise ContractViolation("closed-source teacher parameters changed")


# ---------------------------------------------------------------- formula pieces

def mixup_pair(x1, x2, beta):
    """beta * x1 + (1 - beta) * x2."""
    x1, x2 = np.asarray(x1), np.asarray(x2)
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x2.shape}")
    if not 0 <= beta <= 1:
        raise ValueError(f"mixing coefficient must lie in [0, 1], got {beta}")
    return beta * x1 + (1 - beta) * x2


def mix_batch(images, partner, betas):
    """Row-wise mixup of ``images`` with ``images[partner]``, clipped to [0, 1]."""
    b = np.asarray(betas, dtype=np.float64).reshape(-1, *([1] * (images.ndim - 1)))
    x = images.astype(np.float64)
    mixed = b * x + (1 - b) * x[partner]
    return np.clip(mixed, 0.0, 1.0).astype(np.float32)


def draw_mix_coefficients(alpha, n, rng):
    if alpha <= 0:
        raise ValueError(f"Beta shape must be > 0, got {alpha}")
    return rng.beta(alpha, alpha, size=n)


def _check_stochastic(y, what):
    y = np.asarray(y, dtype=np.float64)
    if (y < -1e-12).any() or not np.allclose(y.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError(f"{what} must be a probability vector (rows)")
    return y


def mixed_pseudo_label(y_teacher, y_student, beta):
    """beta * y_teacher + (1 - beta) * y_student; ``beta`` may be per row."""
    yt = _check_stochastic(y_teacher, "teacher label")
    ys = _check_stochastic(y_student, "student label")
    b = np.asarray(beta, dtype=np.float64)
    if ((b < 0) | (b > 1)).any():
        raise ValueError("label mixing coefficient must lie in [0, 1]")
    if b.ndim == 1:
        b = b[:, None]
    return b * yt + (1 - b) * ys


def smooth_laplace(y, gamma):
    """(y + gamma) / (1 + C * gamma) along the last axis."""
    if gamma < 0:
        raise ValueError(f"Laplace gamma must be >= 0, got {gamma}")
    y = np.asarray(y, dtype=np.float64)
    return (y + gamma) / (1 + y.shape[-1] * gamma)


def joint_confidence(y_teacher, y_student, gamma):
    """Elementwise product of the Laplace-smoothed teacher and student matrices."""
    y_teacher, y_student = np.asarray(y_teacher), np.asarray(y_student)
    if y_teacher.shape != y_student.shape:
        raise ValueError(f"shape mismatch {y_teacher.shape} vs {y_student.shape}")
    return smooth_laplace(y_teacher, gamma) * smooth_laplace(y_student, gamma)


def topk_size(fraction, n, class_count):
    """ceil(fraction * n / class_count), exact for decimal fractions like 0.05."""
    return math.ceil(Fraction(fraction).limit_denominator(10 ** 6) * n / class_count)


def smoothed_target(c, class_count, smoothing):
    t = np.full(class_count, smoothing / class_count)
    t[c] += 1 - smoothing
    return t


@dataclass
class ConfidentSet:
    """Balanced pseudo-labelled set: ``k`` instances per class.

    ``indices[i]`` is a row of the prediction images, ``classes[i]`` its
    pseudo class and ``targets[i]`` the smoothed target vector. An instance may
    appear under more than one class.
    """

    indices: np.ndarray
    classes: np.ndarray
    targets: np.ndarray
    k: int
    per_class_counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.indices)


def select_confident(joint, fraction, smoothing):
    joint = np.asarray(joint, dtype=np.float64)
    n, class_count = joint.shape
    if not 0 < fraction <= 1:
        raise ConfigError("top-K fraction must lie in (0, 1]")
    if n < class_count:
        raise ConfigError(f"need at least as many instances ({n}) as classes ({class_count})")
    k = topk_size(fraction, n, class_count)
    if k > n:
        raise ConfigError(f"K={k} exceeds the {n} available instances")
    indices, classes = [], []
    for c in range(class_count):
        # stable sort of the negated column: larger first, ties by lower index
        indices.append(np.argsort(-joint[:, c], kind="stable")[:k])
        classes.append(np.full(k, c))
    indices = np.concatenate(indices)
    classes = np.concatenate(classes)
    table = np.stack([smoothed_target(c, class_count, smoothing) for c in range(class_count)])
    return ConfidentSet(indices, classes, table[classes], k, {c: k for c in range(class_count)})


# ---------------------------------------------------------------- phases

def distill_epoch(teacher, student, images, cfg, outer_epoch, rng, optimizer, trace=None):
    """One distillation pass over the prediction images; returns the mean loss.

    ``trace``, if given, receives ``(mixed_images, targets)`` per batch.
    """
    if teacher.class_count != student.class_count:
        raise ConfigError("teacher and student must share the class count")
    n = len(images)
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, cfg.batch_size):
        batch = images[order[start:start + cfg.batch_size]]
        b = len(batch)
        partner = rng.permutation(b)
        mixed = mix_batch(batch, partner, draw_mix_coefficients(cfg.image_mix_alpha, b, rng))
        y_teacher = teacher.predict(mixed)
        y_student = predict_soft(student, mixed)
        if outer_epoch == 1:
            beta = np.ones(b)
        else:
            beta = draw_mix_coefficients(cfg.label_mix_alpha, b, rng)
        targets = mixed_pseudo_label(y_teacher, y_student, beta)
        if trace is not None:
            trace.append((mixed, targets))
        try:
            losses.append(gradient_step(student, optimizer, mixed, targets))
        except NumericError as exc:
            raise NumericError(f"distillation, outer epoch {outer_epoch}, batch at {start}: {exc}") from exc
    return float(np.mean(losses))


def build_confident_set(teacher, student, images, cfg):
    joint = joint_confidence(teacher.predict(images), predict_soft(student, images), cfg.laplace_gamma)
    return select_confident(joint, cfg.topk_fraction, cfg.label_smoothing)


def _fit_confident(step, conf, images, batch_size, rng):
    order = rng.permutation(len(conf))
    losses = []
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        losses.append(step(images[conf.indices[sel]], conf.targets[sel]))
    return float(np.mean(losses))


def recall_student(student, conf, images, optimizer, batch_size=64, rng=None):
    """One pass of CE training of the student on the confident set (raw images)."""
    if len(conf) == 0:
        raise ConfigError("confident set is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    return _fit_confident(lambda x, t: gradient_step(student, optimizer, x, t), conf, images,
                          batch_size, rng)


def recall_teacher(teacher, student, images, cfg, rng):
    """Refine an open teacher on a confident set recomputed from the current student.

    Returns ``(mean_loss, confident_set)``.
    """
    if not teacher.writable:
        raise CapabilityError("teacher recall needs an open (trainable) teacher")
    conf = build_confident_set(teacher, student, images, cfg)
    return _fit_confident(teacher.update, conf, images, cfg.batch_size, rng), conf


@dataclass
class AttackResult:
    rcm: Checkpoint
    recalled_labels: np.ndarray
    history: list


def run_mra(teacher, student_arch, images, cfg, student_options=None, monitor=None):
    """Run the full attack and return the recalled model and labels.

    ``monitor(record, model)`` is called after each phase with the model that
    would currently serve as the recalled model; whatever dict it returns is
    merged into the history record. It is how callers attach accuracy tracking
    without this module ever seeing labels.
    """
    if len(images) == 0:
        raise ConfigError("prediction set is empty")
    if (cfg.mode == "open") != teacher.writable:
        raise ConfigError(f"mode {cfg.mode!r} does not match the teacher's access")
    images = np.asarray(images, dtype=np.float32)
    student = Classifier(student_arch, teacher.class_count, images.shape[1:],
                         seed=derive_seed(cfg.seed, "student-init"), **(student_options or {}))
    optimizer = make_optimizer(student, "adamw", cfg.lr_student)
    rng = rng_for(cfg.seed, "mra")
    open_mode = cfg.mode == "open"
    history = []

    def current_rcm():
        return teacher.export() if open_mode else student

    def log(outer, phase, loss):
        record = {"outer_epoch": outer, "phase": phase, "loss": loss}
        if monitor is not None:
            record.update(monitor(record, current_rcm()) or {})
        history.append(record)

    for outer in range(1, cfg.outer_epochs + 1):
        for _ in range(cfg.distill_epochs):
            log(outer, "distill", distill_epoch(teacher, student, images, cfg, outer, rng, optimizer))
        if not cfg.student_recall:
            continue
        for _ in range(cfg.recall_rounds):
            conf = build_confident_set(teacher, student, images, cfg)
            log(outer, "recall_student",
                recall_student(student, conf, images, optimizer, cfg.batch_size, rng))
            if open_mode:
                loss, _ = recall_teacher(teacher, student, images, cfg, rng)
                log(outer, "recall_teacher", loss)

    if open_mode:
        final = teacher.export()
    else:
        teacher.assert_unchanged()
        final = student
    with torch.no_grad():
        recalled = predict_soft(final, images).argmax(axis=1)
    rcm = Checkpoint.from_classifier(final, "RCM", method="mra", config=cfg.digest(), mode=cfg.mode,
                                     seed=cfg.seed, epoch=cfg.outer_epochs)
    return AttackResult(rcm, recalled, history)
