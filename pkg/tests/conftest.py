import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from recallbench.data import SplitSpec, make_blobs, make_splits
from recallbench.train import TrainConfig, train_trm

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_bundle():
    train = make_blobs(3, 30, seed=0, size=6)
    test = make_blobs(3, 10, seed=1, size=6)
    return make_splits(train, test, SplitSpec([0], 0.5, seed=3))


@pytest.fixture(scope="session")
def small_trm(small_bundle):
    return train_trm(small_bundle, "smallcnn", TrainConfig(epochs=8, lr=0.01, seed=0, width=4))


def tiny_config(name="tiny", **overrides):
    doc = {
        "schema_version": 1,
        "name": name,
        "seed": 0,
        "train_data": "blobs-c3-n20-s0",
        "test_data": "blobs-c3-n8-s1",
        "forget_classes": [0],
        "forget_fraction": 0.5,
        "teacher_arch": "smallcnn",
        "student_arch": "smallcnn",
        "train": {"epochs": 4, "lr": 0.01, "width": 4},
        "unlearn": [{"method": "RL", "epochs": 2, "lr": 0.001}],
        "attacks": [
            {"variant": "DST", "outer_epochs": 2, "lr_student": 0.002},
            {"variant": "DST+STU+TCH", "outer_epochs": 2, "lr_student": 0.002, "lr_teacher": 0.001},
        ],
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config()))
    return path
