"""Machine-unlearning baselines that turn a TRM into an unlearned model (ULM).

Implemented methods:

* ``Retrain`` - train a fresh model on the remaining split only.
* ``GA``      - gradient ascent on the forget split.
* ``RL``      - fine-tune on the forget split with random wrong labels.
* ``L1SP``    - fine-tune on the remaining split with an L1 penalty.
* ``FF``      - Fisher forgetting: Gaussian noise scaled by the inverse square
  root of the diagonal empirical Fisher information on the remaining split.
* ``SalUn``   - RL restricted to the most salient parameters for the forget split.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.func import functional_call, grad, vmap

from .errors import ConfigError, RegistryError
from .evaluation import evaluate
from .model import Checkpoint, Classifier, as_tensor, make_optimizer, one_hot, soft_cross_entropy
from .seeding import derive_seed, rng_for, torch_generator
from .train import TrainConfig, fit, run_epoch

METHOD_DEFAULTS = {
    "Retrain": {"optimizer": "adamw"},
    "GA": {},
    "RL": {},
    "L1SP": {"l1": 5e-4},
    "FF": {"sigma": 1e-4, "eps": 1e-6},
    "SalUn": {"ratio": 0.5},
}


@dataclass(frozen=True)
class UnlearnMethod:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in METHOD_DEFAULTS:
            raise RegistryError(f"unknown unlearning method {self.kind!r}; known: {sorted(METHOD_DEFAULTS)}")
        unknown = set(self.params) - set(METHOD_DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged = {**METHOD_DEFAULTS[self.kind], **self.params}
        if self.kind == "L1SP" and merged["l1"] < 0:
            raise ConfigError("L1SP: l1 must be >= 0")
        if self.kind == "FF" and (merged["sigma"] < 0 or merged["eps"] <= 0):
            raise ConfigError("FF: need sigma >= 0 and eps > 0")
        if self.kind == "SalUn" and not 0 <= merged["ratio"] <= 1:
            raise ConfigError("SalUn: ratio must lie in [0, 1]")
        object.__setattr__(self, "params", merged)


@dataclass(frozen=True)
class UnlearnConfig:
    method: UnlearnMethod
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.method, str):
            object.__setattr__(self, "method", UnlearnMethod(self.method))
        if self.method.kind != "FF" and self.epochs < 1:
            raise ConfigError(f"{self.method.kind}: epochs must be >= 1")
        if self.lr < 0 or (self.lr == 0 and self.method.kind == "Retrain"):
            raise ConfigError(f"{self.method.kind}: invalid learning rate {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["method"] = {"kind": self.method.kind, "params": dict(self.method.params)}
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _sgd(model, cfg):
    return make_optimizer(model, "sgd", cfg.lr)


def _random_wrong_labels(labels, class_count, rng):
    return (labels + rng.integers(1, class_count, size=len(labels))) % class_count


def _random_label_epochs(model, forget, cfg, optimizer, after_step=None):
    for epoch in range(1, cfg.epochs + 1):
        rng = rng_for(cfg.seed, "random-labels", epoch)
        targets = one_hot(_random_wrong_labels(forget.labels, forget.class_count, rng), forget.class_count)
        order = rng.permutation(len(forget))
        run_epoch(model, optimizer, forget.images, targets, cfg.batch_size, order, after_step=after_step)


def _retrain(trm, bundle, cfg):
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                     optimizer=cfg.method.params["optimizer"], seed=cfg.seed)
    model = Classifier(trm.arch_id, trm.class_count, trm.input_shape, seed=cfg.seed, **trm.options)
    return fit(model, bundle.remain, tc)


def _gradient_ascent(model, bundle, cfg):
    optimizer = _sgd(model, cfg)
    forget = bundle.forget
    targets = one_hot(forget.labels, forget.class_count)
    for epoch in range(1, cfg.epochs + 1):
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(forget))
        run_epoch(model, optimizer, forget.images, targets, cfg.batch_size, order, ascent=True)
    return model


def _random_label(model, bundle, cfg):
    _random_label_epochs(model, bundle.forget, cfg, _sgd(model, cfg))
    return model


def l1_penalty(strength):
    def penalty(model):
        # d|x|/dx = sign(x), which is 0 at 0
        return strength * sum(p.abs().sum() for p in model.parameters())
    return penalty


def _l1_sparse(model, bundle, cfg):
    remain = bundle.remain
    optimizer = _sgd(model, cfg)
    targets = one_hot(remain.labels, remain.class_count)
    penalty = l1_penalty(cfg.method.params["l1"])
    for epoch in range(1, cfg.epochs + 1):
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(remain))
        run_epoch(model, optimizer, remain.images, targets, cfg.batch_size, order, penalty=penalty)
    return model


def fisher_diagonal(model, dataset, chunk=256):
    """Diagonal empirical Fisher: mean over samples of squared per-sample CE gradients."""
    net = model.net
    params = {k: v.detach() for k, v in net.named_parameters()}
    dtype = model.dtype

    def sample_loss(p, x, y):
        logits = functional_call(net, p, (x.unsqueeze(0),))
        return torch.nn.functional.cross_entropy(logits, y.unsqueeze(0))

    per_sample = vmap(grad(sample_loss), in_dims=(None, 0, 0))
    total = {k: torch.zeros_like(v) for k, v in params.items()}
    for start in range(0, len(dataset), chunk):
        x = as_tensor(dataset.images[start:start + chunk], dtype)
        y = torch.from_numpy(np.array(dataset.labels[start:start + chunk]))
        for k, g in per_sample(params, x, y).items():
            total[k] += (g ** 2).sum(dim=0)
    n = max(len(dataset), 1)
    return torch.cat([(total[k] / n).flatten() for k, _ in net.named_parameters()])


def _fisher_forgetting(model, bundle, cfg):
    fisher = fisher_diagonal(model, bundle.remain)
    sigma, eps = cfg.method.params["sigma"], cfg.method.params["eps"]
    scale = sigma / torch.sqrt(fisher + eps)
    noise = torch.randn(scale.shape, generator=torch_generator(cfg.seed, "fisher-noise"),
                        dtype=scale.dtype)
    theta = torch.as_tensor(model.params, dtype=scale.dtype)
    model.set_params((theta + noise * scale).numpy())
    return model


def saliency_mask(model, dataset, ratio, batch_size=256):
    """Boolean mask over the flat parameter vector: the top ``ratio`` fraction of
    entries by |gradient of the mean forget-set CE|, ties broken by lower index."""
    model.net.zero_grad(set_to_none=True)
    targets = one_hot(dataset.labels, dataset.class_count)
    n = len(dataset)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        t = torch.as_tensor(targets[sl], dtype=model.dtype)
        loss = soft_cross_entropy(model(dataset.images[sl]), t) * (len(t) / n)
        loss.backward()
    g = torch.cat([p.grad.flatten() for p in model.parameters()]).abs().numpy()
    model.net.zero_grad(set_to_none=True)
    k = int(math.floor(ratio * g.size + 0.5))
    mask = np.zeros(g.size, dtype=bool)
    mask[np.argsort(-g, kind="stable")[:k]] = True
    return mask


def _salun(model, bundle, cfg):
    mask = saliency_mask(model, bundle.forget, cfg.method.params["ratio"])
    anchor = torch.as_tensor(model.params)
    chunks, offset = [], 0
    for p in model.parameters():
        n = p.numel()
        chunks.append((p, torch.from_numpy(mask[offset:offset + n]).view_as(p),
                       anchor[offset:offset + n].view_as(p)))
        offset += n

    def restore_unmasked():
        # weight decay and momentum would otherwise leak into frozen entries
        with torch.no_grad():
            for p, m, a in chunks:
                p.copy_(torch.where(m, p, a))

    _random_label_epochs(model, bundle.forget, cfg, _sgd(model, cfg), after_step=restore_unmasked)
    return model


METHODS = {
    "GA": _gradient_ascent,
    "RL": _random_label,
    "L1SP": _l1_sparse,
    "FF": _fisher_forgetting,
    "SalUn": _salun,
}


def unlearn(trm, bundle, cfg):
    """Apply ``cfg.method`` to the TRM checkpoint and return a ULM checkpoint."""
    if trm.role != "TRM":
        raise ConfigError(f"unlearn expects a TRM checkpoint, got role {trm.role}")
    if trm.class_count != bundle.class_count or tuple(trm.input_shape) != bundle.train.image_shape:
        raise ConfigError("checkpoint does not match the split bundle")
    kind = cfg.method.kind
    if kind == "Retrain":
        model = _retrain(trm, bundle, cfg)
    else:
        model = trm.to_classifier()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, kind))
            model = METHODS[kind](model, bundle, cfg)
    return Checkpoint.from_classifier(model, "ULM", method=kind, params=dict(cfg.method.params),
                                      seed=cfg.seed, epoch=cfg.epochs, config=cfg.digest(),
                                      source_trm_hash=trm.content_hash())


def verify_unlearning(ulm, bundle, threshold=0.5):
    """Evaluate a ULM; the report's ``unlearned`` flag is acc(forget) < threshold."""
    if ulm.role != "ULM":
        raise ConfigError(f"verify_unlearning expects a ULM checkpoint, got role {ulm.role}")
    report = evaluate(ulm, bundle)
    report.unlearned = bool(report.acc_f < threshold)
    return report
