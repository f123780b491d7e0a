"""Experiment orchestration: prepare -> train -> unlearn -> attack -> report.

One JSON config describes an experiment. Every stage writes into
``<output root>/<name>/`` and leaves a ``stamp.json`` keyed by the content hash
of its inputs; a re-run with an unchanged config finds matching stamps and
reuses the artifacts instead of recomputing them.

Layout::

    config.json                          resolved config snapshot
    data/manifest.json                   split indices
    trm/model.rbck  trm/metrics.jsonl  trm/metrics.json
    ulm/<method>/model.rbck  provenance.json  metrics.json
    attack/<method>/<variant>/config.json  metrics.jsonl  rcm.rbck
                              recalled_labels.csv  metrics.json
    summary.csv  delta.csv
"""
import csv
import fnmatch
import hashlib
import io
import json
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SplitSpec, load_dataset, load_manifest, make_splits, save_manifest
from .errors import ConfigError, RegistryError, StageError
from .evaluation import MetricsReport, delta_report, evaluate, write_delta_csv
from .mra import AttackConfig, TeacherAccess, run_mra
from .model import load_checkpoint, predict_labels, save_checkpoint
from .seeding import derive_seed
from .train import TrainConfig, train_trm
from .unlearn import UnlearnConfig, UnlearnMethod, unlearn

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "RECALLBENCH_OUTPUT_ROOT"
STAGES = ("prepare", "train", "unlearn", "attack", "report")
SUMMARY_COLUMNS = ("dataset", "teacher_arch", "student_arch", "method", "variant", "split",
                   "acc_trm", "acc_ulm", "acc_rcm", "delta")

# ablation variant -> the attack settings it implies
VARIANTS = {
    "DST": {"student_recall": False},
    "DST+STU": {"mode": "closed"},
    "DST+STU+TCH": {"mode": "open"},
}


# ---------------------------------------------------------------- config

def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _check_keys(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class UnlearnSpec:
    name: str
    method: str
    params: dict = field(default_factory=dict)
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, [f.name for f in fields(cls)], "unlearn entry")
        if "method" not in d:
            raise ConfigError("unlearn entry needs a 'method'")
        d = {"name": d["method"], **d}
        spec = cls(**d)
        try:
            spec.config(0)  # validate early
        except RegistryError as exc:
            raise ConfigError(str(exc)) from exc
        return spec

    def config(self, seed):
        return UnlearnConfig(UnlearnMethod(self.method, dict(self.params)), epochs=self.epochs,
                             lr=self.lr, batch_size=self.batch_size, seed=seed)


_ATTACK_FIELDS = [f.name for f in fields(AttackConfig) if f.name != "seed"]


@dataclass(frozen=True)
class AttackSpec:
    name: str
    variant: str
    settings: dict

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        variant = d.pop("variant", None)
        name = d.pop("name", None)
        _check_keys(d, _ATTACK_FIELDS, "attack entry")
        if variant is not None:
            if variant not in VARIANTS:
                raise ConfigError(f"unknown ablation variant {variant!r}; known: {sorted(VARIANTS)}")
            for key, want in VARIANTS[variant].items():
                if key in d and d[key] != want:
                    raise ConfigError(f"variant {variant} requires {key}={want!r}, config has {d[key]!r}")
                d[key] = want
        variant = variant or d.get("mode", "closed")
        spec = cls(name or variant, variant, d)
        spec.config(0)
        return spec

    def config(self, seed):
        return AttackConfig(**self.settings, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    train_data: str
    test_data: str
    forget_classes: tuple
    forget_fraction: float = 0.5
    teacher_arch: str = "smallcnn"
    student_arch: str = "smallcnn"
    student_width: int = None
    train: dict = field(default_factory=dict)
    unlearn: tuple = ()
    attacks: tuple = ()
    seed: int = 0
    output_root: str = "runs"

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        version = doc.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        _check_keys(doc, [f.name for f in fields(cls)], "experiment config")
        for key in ("name", "train_data", "test_data", "forget_classes"):
            if key not in doc:
                raise ConfigError(f"experiment config is missing {key!r}")
        doc["forget_classes"] = tuple(doc["forget_classes"])
        doc["unlearn"] = tuple(UnlearnSpec.from_dict(u) for u in doc.get("unlearn", ()))
        doc["attacks"] = tuple(AttackSpec.from_dict(a) for a in doc.get("attacks", ()))
        cfg = cls(**doc)
        for what, items in (("unlearn", cfg.unlearn), ("attack", cfg.attacks)):
            names = [s.name for s in items]
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate {what} names {names}; give entries a distinct 'name'")
        if not isinstance(cfg.seed, int) or cfg.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {cfg.seed!r}")
        _check_keys(cfg.train, [f.name for f in fields(TrainConfig) if f.name != "seed"], "train")
        cfg.train_config()
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["forget_classes"] = list(self.forget_classes)
        d["unlearn"] = [asdict(u) for u in self.unlearn]
        d["attacks"] = [{"name": a.name, "variant": a.variant, **a.settings} for a in self.attacks]
        return {"schema_version": SCHEMA_VERSION, **d}

    def with_seed(self, seed):
        return ExperimentConfig.from_dict({**self.to_dict(), "seed": seed})

    # child seeds: one global seed determines everything
    def split_spec(self):
        return SplitSpec(list(self.forget_classes), self.forget_fraction, derive_seed(self.seed, "split"))

    def train_config(self):
        return TrainConfig(**self.train, seed=derive_seed(self.seed, "train"))

    def unlearn_config(self, spec):
        return spec.config(derive_seed(self.seed, "unlearn", spec.name))

    def attack_config(self, uspec, aspec):
        return aspec.config(derive_seed(self.seed, "attack", uspec.name, aspec.name))

    def student_options(self):
        if self.student_arch == "linear":
            return {}
        return {"width": self.student_width or self.train_config().width}


def load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------- file helpers

def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _fmt(v):
    return "" if v is None else f"{v:.6f}" if isinstance(v, float) else v


# ---------------------------------------------------------------- experiment

class Experiment:
    """An experiment directory plus the config that populates it."""

    def __init__(self, cfg, root=None):
        self.cfg = cfg
        root = root or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_root
        self.dir = Path(root) / cfg.name
        self.events = []
        self._bundle = None

    # -- caching

    def _fresh(self, cell_dir, key, artifacts):
        stamp = cell_dir / "stamp.json"
        if not stamp.exists() or _read_json(stamp).get("key") != key:
            return False
        return all((cell_dir / a).exists() for a in artifacts)

    def _stamp(self, cell_dir, key):
        _write_json(cell_dir / "stamp.json", {"key": key})

    def _record(self, stage, cell, status):
        log.info("%s %s: %s", stage, cell, status)
        self.events.append({"stage": stage, "cell": cell, "status": status})

    # -- stages

    def prepare(self):
        d = self.dir / "data"
        key = _digest([self.cfg.train_data, self.cfg.test_data, self.cfg.split_spec().__dict__])
        _write_json(self.dir / "config.json", self.cfg.to_dict())
        if self._fresh(d, key, ["manifest.json"]):
            self._record("prepare", "data", "cached")
            return
        train, test = load_dataset(self.cfg.train_data), load_dataset(self.cfg.test_data)
        bundle = make_splits(train, test, self.cfg.split_spec())
        d.mkdir(parents=True, exist_ok=True)
        save_manifest(bundle, d / "manifest.json")
        self._stamp(d, key)
        self._bundle = bundle
        self._record("prepare", "data", "computed")

    def bundle(self):
        if self._bundle is None:
            manifest = self.dir / "data" / "manifest.json"
            if not manifest.exists():
                raise StageError("prepare", f"no split manifest at {manifest}; run 'prepare' first")
            self._bundle = load_manifest(manifest, load_dataset(self.cfg.train_data),
                                         load_dataset(self.cfg.test_data))
        return self._bundle

    def _prepare_key(self):
        return _read_json(self.dir / "data" / "stamp.json")["key"]

    def train(self):
        d = self.dir / "trm"
        tc = self.cfg.train_config()
        key = _digest([self._prepare_key(), self.cfg.teacher_arch, tc.digest()])
        if self._fresh(d, key, ["model.rbck", "metrics.json", "metrics.jsonl"]):
            self._record("train", "trm", "cached")
            return
        d.mkdir(parents=True, exist_ok=True)
        bundle = self.bundle()
        trm = train_trm(bundle, self.cfg.teacher_arch, tc, metrics_path=d / "metrics.jsonl.tmp")
        os.replace(d / "metrics.jsonl.tmp", d / "metrics.jsonl")
        save_checkpoint(trm, d / "model.rbck")
        _write_json(d / "metrics.json", evaluate(trm, bundle).to_records())
        self._stamp(d, key)
        self._record("train", "trm", "computed")

    def _trm(self):
        path = self.dir / "trm" / "model.rbck"
        if not path.exists():
            raise StageError("train", f"no TRM at {path}; run 'train' first")
        return load_checkpoint(path)

    def unlearn_cell(self, spec):
        d = self.dir / "ulm" / spec.name
        trm = self._trm()
        uc = self.cfg.unlearn_config(spec)
        key = _digest([trm.content_hash(), uc.digest()])
        if self._fresh(d, key, ["model.rbck", "provenance.json", "metrics.json"]):
            self._record("unlearn", spec.name, "cached")
            return
        d.mkdir(parents=True, exist_ok=True)
        bundle = self.bundle()
        ulm = unlearn(trm, bundle, uc)
        save_checkpoint(ulm, d / "model.rbck")
        prov = {k: ulm.provenance[k] for k in ("method", "params", "seed", "source_trm_hash")}
        _write_json(d / "provenance.json", {**prov, "config": uc.to_dict()})
        _write_json(d / "metrics.json", evaluate(ulm, bundle).to_records())
        self._stamp(d, key)
        self._record("unlearn", spec.name, "computed")

    def attack_cell(self, uspec, aspec):
        d = self.dir / "attack" / uspec.name / aspec.name
        ulm_path = self.dir / "ulm" / uspec.name / "model.rbck"
        if not ulm_path.exists():
            raise StageError("attack", f"no ULM for {uspec.name}; run 'unlearn' first")
        ulm = load_checkpoint(ulm_path)
        ac = self.cfg.attack_config(uspec, aspec)
        options = self.cfg.student_options()
        key = _digest([ulm.content_hash(), ac.digest(), self.cfg.student_arch, options])
        artifacts = ["config.json", "metrics.jsonl", "rcm.rbck", "recalled_labels.csv", "metrics.json"]
        if self._fresh(d, key, artifacts):
            self._record("attack", f"{uspec.name}/{aspec.name}", "cached")
            return
        d.mkdir(parents=True, exist_ok=True)
        bundle = self.bundle()
        images = bundle.prediction.images
        truth = bundle.prediction.labels
        test_rows, forget_rows = bundle.test_rows, bundle.forget_rows

        def monitor(record, model):
            pred = predict_labels(model, images)
            hit = pred == truth
            f = hit[forget_rows]
            return {"acc_ts": float(hit[test_rows].mean()), "acc_f": float(f.mean()) if f.size else None}

        _write_json(d / "config.json", {"variant": aspec.variant, "student_arch": self.cfg.student_arch,
                                        "student_options": options, **asdict(ac)})
        teacher = TeacherAccess.from_checkpoint(ulm, ac.mode, ac.lr_teacher)
        result = run_mra(teacher, self.cfg.student_arch, images, ac, student_options=options,
                         monitor=monitor)
        _atomic_write(d / "metrics.jsonl", "".join(json.dumps(r) + "\n" for r in result.history))
        save_checkpoint(result.rcm, d / "rcm.rbck")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["instance_index", "predicted_class"])
        writer.writerows(enumerate(result.recalled_labels.tolist()))
        _atomic_write(d / "recalled_labels.csv", buf.getvalue())
        report = evaluate(result.rcm, bundle, provenance={"variant": aspec.variant,
                                                          "source_ulm_hash": ulm.content_hash()})
        _write_json(d / "metrics.json", report.to_records())
        self._stamp(d, key)
        self._record("attack", f"{uspec.name}/{aspec.name}", "computed")

    def report(self):
        """Rebuild summary.csv and delta.csv from the metrics files on disk."""
        def metrics(path):
            return MetricsReport.from_records(_read_json(path)) if path.exists() else None

        trm = metrics(self.dir / "trm" / "metrics.json")
        if trm is None:
            raise StageError("report", "no TRM metrics; run 'train' first")
        cfg = self.cfg
        base = {"dataset": cfg.train_data, "teacher_arch": cfg.teacher_arch, "student_arch": cfg.student_arch}
        rows, deltas = [], []

        def emit(method, variant, ulm, rcm):
            for split in ("test", "forget"):
                a_trm = trm.splits[split].acc
                a_ulm = ulm.splits[split].acc if ulm else None
                a_rcm = rcm.splits[split].acc if rcm else None
                delta = a_rcm - a_ulm if rcm and ulm else None
                rows.append({**base, "method": method, "variant": variant, "split": split,
                             "acc_trm": a_trm, "acc_ulm": a_ulm, "acc_rcm": a_rcm, "delta": delta})

        if not cfg.unlearn:
            emit("", "", None, None)
        for uspec in cfg.unlearn:
            ulm = metrics(self.dir / "ulm" / uspec.name / "metrics.json")
            if ulm is None:
                continue
            rcms = [(a, metrics(self.dir / "attack" / uspec.name / a.name / "metrics.json"))
                    for a in cfg.attacks]
            rcms = [(a, r) for a, r in rcms if r is not None]
            if not rcms:
                emit(uspec.name, "", ulm, None)
            for aspec, rcm in rcms:
                emit(uspec.name, aspec.variant, ulm, rcm)
                for split, d in delta_report(ulm, rcm).items():
                    deltas.append({"dataset": cfg.train_data, "method": f"{uspec.name}/{aspec.name}",
                                   "split": split, **d})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: _fmt(v) for k, v in r.items()} for r in rows)
        _atomic_write(self.dir / "summary.csv", buf.getvalue())
        write_delta_csv(deltas, self.dir / "delta.csv.tmp")
        os.replace(self.dir / "delta.csv.tmp", self.dir / "delta.csv")
        self._record("report", "summary", "computed")
        return rows

    # -- driving

    def cells(self, stage, only=None):
        if stage == "unlearn":
            out = [(f"unlearn/{u.name}", (u,)) for u in self.cfg.unlearn]
            if only:
                # an unlearn cell is also needed by any selected attack on it
                return [c for c in out if fnmatch.fnmatchcase(c[0], only) or
                        any(fnmatch.fnmatchcase(f"attack/{c[1][0].name}/{a.name}", only)
                            for a in self.cfg.attacks)]
        elif stage == "attack":
            out = [(f"attack/{u.name}/{a.name}", (u, a)) for u in self.cfg.unlearn for a in self.cfg.attacks]
        else:
            raise ValueError(stage)
        if only:
            out = [c for c in out if fnmatch.fnmatchcase(c[0], only)]
        return out

    def run_stage(self, stage, only=None, jobs=1):
        """Run one stage; ``only`` is a glob over cell ids such as ``attack/RL/*``."""
        try:
            if stage == "prepare":
                return self.prepare()
            if stage == "train":
                return self.train()
            if stage == "report":
                return self.report()
            if stage not in ("unlearn", "attack"):
                raise ConfigError(f"unknown stage {stage!r}; known: {STAGES}")
            cells = self.cells(stage, only)
            if jobs > 1 and len(cells) > 1:
                self._run_parallel(stage, cells, jobs)
            else:
                for cell_id, args in cells:
                    self._run_cell(stage, cell_id, args)
        except (StageError, ConfigError):
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc

    def _run_cell(self, stage, cell_id, args):
        try:
            (self.unlearn_cell if stage == "unlearn" else self.attack_cell)(*args)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, f"{cell_id}: {type(exc).__name__}: {exc}") from exc

    def _run_parallel(self, stage, cells, jobs):
        root = str(self.dir.parent)
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = [pool.submit(_worker, self.cfg.to_dict(), root, stage, cell_id)
                       for cell_id, _ in cells]
            for fut in futures:
                self.events.extend(fut.result())

    def run(self, stages=STAGES, only=None, jobs=1):
        for stage in stages:
            self.run_stage(stage, only=only, jobs=jobs)
        return self.dir


def _worker(cfg_dict, root, stage, cell_id):
    exp = Experiment(ExperimentConfig.from_dict(cfg_dict), root=root)
    [(_, args)] = [c for c in exp.cells(stage) if c[0] == cell_id]
    exp._run_cell(stage, cell_id, args)
    return exp.events


def run_experiment(config, root=None, seed=None, only=None, jobs=1):
    """Run every stage for ``config`` (a path or an ExperimentConfig); returns the Experiment."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    exp = Experiment(cfg, root=root)
    exp.run(only=only, jobs=jobs)
    return exp


def read_summary(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary_means(summaries, method, variant, split, column):
    """Mean of one numeric summary column over several runs (e.g. seeds)."""
    vals = [float(r[column]) for rows in summaries for r in rows
            if r["method"] == method and r["variant"] == variant and r["split"] == split]
    if not vals:
        raise KeyError((method, variant, split))
    return float(np.mean(vals))
