"""Membership recall attacks against machine-unlearned image classifiers."""
from .data import LabeledDataset, SplitBundle, SplitSpec, load_dataset, make_blobs, make_splits
from .errors import (CapabilityError, CheckpointError, ConfigError, ContractViolation, DatasetError,
                     DegenerateSplitError, LineageError, NumericError, RecallBenchError, RegistryError,
                     SpecError, StageError, StaleManifestError)
from .evaluation import MetricsReport, delta_report, evaluate
from .model import Checkpoint, Classifier, load_checkpoint, predict_soft, save_checkpoint
from .mra import AttackConfig, TeacherAccess, run_mra, select_confident
from .pipeline import ExperimentConfig, load_config, run_experiment
from .train import TrainConfig, train_trm
from .unlearn import UnlearnConfig, UnlearnMethod, unlearn, verify_unlearning

__version__ = "0.1.0"
