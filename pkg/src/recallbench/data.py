"""Labeled image datasets, the five experiment splits, and split manifests."""
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, DegenerateSplitError, SpecError, StaleManifestError
from .seeding import rng_for

MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
BLOBS_PATTERN = re.compile(r"^blobs-c(\d+)-n(\d+)(?:-s(\d+))?$")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images (N, H, W, channels) in [0, 1] with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be (N, H, W, channels), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DatasetError(f"{self.name}: {labels.shape[0]} labels for {images.shape[0]} images")
        if self.class_count < 2:
            raise DatasetError(f"{self.name}: need at least 2 classes, got {self.class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DatasetError(f"{self.name}: label out of range [0, {self.class_count})")
        if images.size and not (np.isfinite(images).all() and images.min() >= 0.0 and images.max() <= 1.0):
            raise DatasetError(f"{self.name}: image values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count,
                              name or self.name)

    def checksum(self):
        h = hashlib.sha256()
        h.update(f"{self.class_count}:{self.images.shape}".encode())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def concat(first, second, name):
    if first.class_count != second.class_count:
        raise DatasetError("cannot concatenate datasets with different class counts")
    if len(first) and len(second) and first.image_shape != second.image_shape:
        raise DatasetError("cannot concatenate datasets with different image shapes")
    return LabeledDataset(np.concatenate([first.images, second.images]),
                          np.concatenate([first.labels, second.labels]),
                          first.class_count, name)


# ---------------------------------------------------------------- loading

def make_blobs(class_count, per_class, seed=0, size=8, channels=3, noise=0.18, name=None):
    """Synthetic 'gaussian blobs' images: class-coloured patches plus pixel noise.

    Prototypes depend only on ``class_count``/``size``/``channels``, so sets drawn
    with different ``seed`` values (e.g. train and test) share the same classes.
    """
    if class_count < 2 or per_class < 1:
        raise DatasetError("blobs need class_count >= 2 and per_class >= 1")
    proto_rng = rng_for("blobs-prototypes", class_count, size, channels)
    background = proto_rng.uniform(0.25, 0.75, size=(class_count, 1, 1, channels))
    patch_color = proto_rng.uniform(0.0, 1.0, size=(class_count, 1, 1, channels))
    half = max(size // 2, 1)
    prototypes = np.repeat(np.repeat(background, size, axis=1), size, axis=2)
    for c in range(class_count):
        r, q = proto_rng.integers(0, size - half + 1, size=2)
        prototypes[c, r:r + half, q:q + half, :] = patch_color[c]

    rng = rng_for("blobs-samples", class_count, per_class, size, seed)
    labels = np.repeat(np.arange(class_count), per_class)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(labels.size, size, size, channels))
    images = np.clip(images, 0.0, 1.0)
    return LabeledDataset(images, labels, class_count,
                          name or f"blobs-c{class_count}-n{per_class}-s{seed}")


def _load_image_folder(root):
    from PIL import Image

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class folders found")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            if images and arr.shape != images[0].shape:
                raise DatasetError(f"{path}: shape {arr.shape} differs from {images[0].shape}")
            images.append(arr)
            labels.append(label)
    if not images:
        raise DatasetError(f"{root}: class folders contain no images")
    if len(class_dirs) < 2:
        raise DatasetError(f"{root}: need at least 2 class folders")
    return LabeledDataset(np.stack(images), np.asarray(labels), len(class_dirs), root.name)


def load_dataset(source, seed=None):
    """Load a dataset from ``root/<class_name>/<images>`` or a ``blobs-cN-nM[-sK]`` name.

    ``seed`` overrides the ``-sK`` suffix of a blobs name; it is ignored for folders.
    """
    source = str(source)
    m = BLOBS_PATTERN.match(source)
    if m:
        class_count, per_class = int(m.group(1)), int(m.group(2))
        if seed is None:
            seed = int(m.group(3) or 0)
        return make_blobs(class_count, per_class, seed=seed)
    root = Path(source)
    if not root.exists():
        raise FileNotFoundError(f"dataset source not found: {source}")
    if not root.is_dir():
        raise DatasetError(f"{source}: expected a directory of class folders")
    return _load_image_folder(root)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    forget_classes: tuple
    forget_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "forget_classes", tuple(int(c) for c in self.forget_classes))
        if len(set(self.forget_classes)) != len(self.forget_classes):
            raise SpecError(f"forget classes must be distinct: {self.forget_classes}")
        if not 0.0 <= self.forget_fraction <= 1.0:
            raise SpecError(f"forget_fraction must lie in [0, 1], got {self.forget_fraction}")
        if not 0 <= self.seed < 2 ** 64:
            raise SpecError("seed must be a 64-bit unsigned integer")

    def validate(self, class_count):
        bad = [c for c in self.forget_classes if not 0 <= c < class_count]
        if bad:
            raise SpecError(f"forget classes {bad} out of range for {class_count} classes")


@dataclass(frozen=True, eq=False)
class SplitBundle:
    train: LabeledDataset
    test: LabeledDataset
    forget: LabeledDataset
    remain: LabeledDataset
    prediction: LabeledDataset
    spec: SplitSpec
    # original indices into the train / test sets
    manifest: dict = field(default_factory=dict)

    @property
    def class_count(self):
        return self.train.class_count

    @property
    def test_rows(self):
        """Slice of prediction rows that come from the test set."""
        return slice(0, len(self.test))

    @property
    def forget_rows(self):
        return slice(len(self.test), len(self.prediction))

    def lineage(self):
        """Hash identifying the data and index sets this bundle was built from."""
        h = hashlib.sha256(dataset_checksum(self.train, self.test).encode())
        for key in ("train", "test", "forget"):
            h.update(key.encode())
            h.update(np.asarray(self.manifest[key], dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def forget_count(fraction, n):
    # round half up
    return int(math.floor(fraction * n + 0.5))


def _assemble(train, test, spec, forget_idx):
    forget_idx = np.sort(np.asarray(forget_idx, dtype=np.int64))
    train_idx = np.arange(len(train), dtype=np.int64)
    remain_idx = np.setdiff1d(train_idx, forget_idx, assume_unique=True)
    test_idx = np.arange(len(test), dtype=np.int64)
    forget = train.subset(forget_idx, "forget")
    return SplitBundle(
        train=train,
        test=test,
        forget=forget,
        remain=train.subset(remain_idx, "remain"),
        prediction=concat(test, forget, "prediction"),
        spec=spec,
        manifest={"train": train_idx, "test": test_idx, "forget": forget_idx, "remain": remain_idx},
    )


def make_splits(dataset_train, dataset_test, spec):
    """Carve the forget/remain/prediction splits out of a train/test pair.

    Each forgotten class is sampled independently with a child seed derived from
    ``(spec.seed, class_id)``, so adding a class never perturbs another's sample.
    """
    spec.validate(dataset_train.class_count)
    if dataset_test.class_count != dataset_train.class_count:
        raise SpecError("train and test class counts differ")
    chosen = []
    for c in spec.forget_classes:
        members = np.flatnonzero(dataset_train.labels == c)
        if members.size == 0:
            raise DegenerateSplitError(f"forget class {c} has no training samples")
        k = forget_count(spec.forget_fraction, members.size)
        order = rng_for(spec.seed, "forget-class", c).permutation(members.size)
        chosen.append(members[order[:k]])
    forget_idx = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    return _assemble(dataset_train, dataset_test, spec, forget_idx)


def dataset_checksum(train, test):
    return hashlib.sha256((train.checksum() + test.checksum()).encode()).hexdigest()


def save_manifest(bundle, path):
    doc = {
        "format_version": MANIFEST_VERSION,
        "dataset_checksum": dataset_checksum(bundle.train, bundle.test),
        "seed": bundle.spec.seed,
        "forget_classes": list(bundle.spec.forget_classes),
        "forget_fraction": bundle.spec.forget_fraction,
        "splits": {k: np.asarray(bundle.manifest[k]).tolist() for k in ("train", "test", "forget")},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, path)


def load_manifest(path, dataset_train, dataset_test):
    doc = json.loads(Path(path).read_text())
    if doc.get("dataset_checksum") != dataset_checksum(dataset_train, dataset_test):
        raise StaleManifestError(f"{path}: manifest was built from different data")
    splits = doc["splits"]
    n_train, n_test = len(dataset_train), len(dataset_test)
    train_idx = np.asarray(splits["train"], dtype=np.int64)
    forget_idx = np.asarray(splits["forget"], dtype=np.int64)
    test_idx = np.asarray(splits["test"], dtype=np.int64)
    for key, idx, bound in (("train", train_idx, n_train), ("forget", forget_idx, n_train),
                            ("test", test_idx, n_test)):
        if idx.size and (idx.min() < 0 or idx.max() >= bound):
            raise StaleManifestError(f"{path}: {key} index out of range [0, {bound})")
    if not np.array_equal(train_idx, np.arange(n_train)) or not np.array_equal(test_idx, np.arange(n_test)):
        raise StaleManifestError(f"{path}: train/test manifests must cover the full datasets")
    if np.unique(forget_idx).size != forget_idx.size:
        raise StaleManifestError(f"{path}: duplicate forget indices")
    spec = SplitSpec(doc["forget_classes"], doc.get("forget_fraction", 0.5), doc["seed"])
    return _assemble(dataset_train, dataset_test, spec, forget_idx)
