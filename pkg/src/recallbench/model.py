"""Classifiers, soft-label prediction, gradient steps and checkpoint files."""
import copy
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, NumericError, RegistryError

PROB_FLOOR = 1e-12
ROLES = ("TRM", "ULM", "STM", "RCM")
CHECKPOINT_MAGIC = b"RBCK"
CHECKPOINT_VERSION = 1

torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- architectures

class _Linear(nn.Module):
    def __init__(self, input_shape, class_count, width=None):
        super().__init__()
        h, w, ch = input_shape
        self.fc = nn.Linear(h * w * ch, class_count)

    def forward(self, x):
        return self.fc(x.flatten(1))

    def head(self):
        return self.fc


class SmallCNN(nn.Module):
    def __init__(self, input_shape, class_count, width=16):
        super().__init__()
        ch = input_shape[2]
        self.conv1 = nn.Conv2d(ch, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.fc = nn.Linear(2 * width, class_count)

    def forward(self, x):
        x = torch.relu(self.conv1(x))
        x = nn.functional.max_pool2d(x, 2) if min(x.shape[-2:]) >= 2 else x
        x = torch.relu(self.conv2(x))
        return self.fc(x.mean(dim=(2, 3)))

    def head(self):
        return self.fc


class _ResidualBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return torch.relu(x + self.conv2(torch.relu(self.conv1(x))))


class MiniResNet(nn.Module):
    def __init__(self, input_shape, class_count, width=16, blocks=4):
        super().__init__()
        self.stem = nn.Conv2d(input_shape[2], width, 3, padding=1)
        self.blocks = nn.Sequential(*[_ResidualBlock(width) for _ in range(blocks)])
        self.fc = nn.Linear(width, class_count)

    def forward(self, x):
        x = self.blocks(torch.relu(self.stem(x)))
        return self.fc(x.mean(dim=(2, 3)))

    def head(self):
        return self.fc


ARCHITECTURES = {
    "linear": _Linear,
    "smallcnn": SmallCNN,
    "mini-resnet": MiniResNet,
}


def get_architecture(arch_id):
    try:
        return ARCHITECTURES[arch_id]
    except KeyError:
        raise RegistryError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}") from None


# ---------------------------------------------------------------- classifier

def as_tensor(images, dtype=torch.float32):
    """(N, H, W, channels) array -> (N, channels, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        x = images
    else:
        x = torch.from_numpy(np.require(images, requirements=["C", "W"]))
    return x.to(dtype).permute(0, 3, 1, 2)


class Classifier:
    """A registered architecture plus its parameters.

    Calling the classifier returns class probabilities (rows sum to one); all
    registered nets are free of batch statistics and dropout, so inference is
    deterministic and does not depend on batch composition.
    """

    def __init__(self, arch_id, class_count, input_shape, seed=0, **options):
        factory = get_architecture(arch_id)
        self.arch_id = arch_id
        self.class_count = int(class_count)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.options = dict(options)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = factory(self.input_shape, self.class_count, **self.options)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def parameters(self):
        return self.net.parameters()

    def logits(self, images):
        if tuple(images.shape[1:]) != self.input_shape:
            raise ValueError(f"image shape {tuple(images.shape[1:])} does not match {self.input_shape}")
        return self.net(as_tensor(images, self.dtype))

    def __call__(self, images):
        return torch.softmax(self.logits(images), dim=1)

    @property
    def params(self):
        """Flat float32 copy of all parameters."""
        with torch.no_grad():
            vec = nn.utils.parameters_to_vector(self.net.parameters())
        return vec.detach().to(torch.float32).numpy().copy()

    def set_params(self, flat):
        flat = torch.as_tensor(np.asarray(flat))
        if flat.numel() != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {flat.numel()}")
        offset = 0
        with torch.no_grad():
            # copy, never alias: the caller's buffer must stay untouched by training
            for p in self.net.parameters():
                p.copy_(flat[offset:offset + p.numel()].view_as(p))
                offset += p.numel()

    @property
    def param_count(self):
        return sum(p.numel() for p in self.net.parameters())

    def checksum(self):
        return hashlib.sha256(self.params.tobytes()).hexdigest()

    def clone(self):
        return copy.deepcopy(self)

    def double(self):
        self.net.double()
        return self


def predict_soft(model, images, batch_size=512):
    """Row-stochastic (N, C) float64 matrix of class probabilities."""
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            rows.append(model(images[start:start + batch_size]).double().numpy())
    if not rows:
        return np.zeros((0, model.class_count))
    probs = np.concatenate(rows)
    if not np.isfinite(probs).all():
        raise NumericError(f"{model.arch_id}: non-finite probabilities")
    return probs


def predict_labels(model, images, batch_size=512):
    # np.argmax breaks ties towards the lowest class index
    return predict_soft(model, images, batch_size).argmax(axis=1)


def soft_cross_entropy(probs, targets):
    """Mean of -sum_c t_c log p_c, with p floored at 1e-12; targets are constants."""
    return -(targets.detach() * probs.clamp_min(PROB_FLOOR).log()).sum(dim=1).mean()


def one_hot(labels, class_count):
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------- optimisation

OPTIMIZERS = {
    # AdamW for training and the attack, SGD + momentum for unlearning
    "adamw": dict(weight_decay=0.01),
    "sgd": dict(momentum=0.9, weight_decay=0.005),
}


def make_optimizer(model, kind="adamw", lr=1e-3, **overrides):
    if kind not in OPTIMIZERS:
        raise RegistryError(f"unknown optimizer {kind!r}; known: {sorted(OPTIMIZERS)}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    options = {**OPTIMIZERS[kind], **overrides}
    if kind == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=lr, **options)
    return torch.optim.SGD(model.parameters(), lr=lr, **options)


def gradient_step(model, optimizer, images, targets, ascent=False, penalty=None):
    """One first-order update on CE(model(images), targets); returns the CE value.

    ``ascent`` flips the sign of the CE term. ``penalty`` is an optional callable
    returning an extra differentiable term added to the objective.
    """
    targets = torch.as_tensor(np.asarray(targets), dtype=model.dtype)
    optimizer.zero_grad(set_to_none=True)
    loss = soft_cross_entropy(model(images), targets)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} on a batch of {len(images)}")
    objective = -loss if ascent else loss
    if penalty is not None:
        objective = objective + penalty(model)
    objective.backward()
    for name, p in model.net.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {name} (loss={loss.item():.4g})")
    optimizer.step()
    return loss.item()


# ---------------------------------------------------------------- checkpoints

@dataclass(eq=False)
class Checkpoint:
    arch_id: str
    class_count: int
    input_shape: tuple
    params: np.ndarray
    role: str
    provenance: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        self.params = np.asarray(self.params, dtype=np.float32)
        self.input_shape = tuple(int(s) for s in self.input_shape)

    @classmethod
    def from_classifier(cls, model, role, **provenance):
        return cls(model.arch_id, model.class_count, model.input_shape, model.params, role,
                   provenance, dict(model.options))

    def to_classifier(self):
        model = Classifier(self.arch_id, self.class_count, self.input_shape, **self.options)
        model.set_params(self.params)
        return model

    def content_hash(self):
        h = hashlib.sha256(json.dumps([self.arch_id, self.class_count, list(self.input_shape),
                                       self.options], sort_keys=True).encode())
        h.update(self.params.astype("<f4").tobytes())
        return h.hexdigest()[:16]


def save_checkpoint(ckpt, path):
    """Write ``RBCK | u32 header length | JSON header | little-endian f32 params``."""
    payload = ckpt.params.astype("<f4").tobytes()
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "arch_id": ckpt.arch_id,
        "class_count": ckpt.class_count,
        "input_shape": list(ckpt.input_shape),
        "options": ckpt.options,
        "role": ckpt.role,
        "provenance": ckpt.provenance,
        "param_count": int(ckpt.params.size),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC or len(blob) < 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = blob[8 + n:]
    if len(payload) != 4 * header["param_count"] or \
            hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupted parameter payload")
    get_architecture(header["arch_id"])
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Checkpoint(header["arch_id"], header["class_count"], header["input_shape"], params,
                      header["role"], header["provenance"], header.get("options", {}))
