import inspect
import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from recallbench import mra
from recallbench.errors import CapabilityError, ConfigError, ContractViolation
from recallbench.model import Checkpoint, Classifier, make_optimizer, predict_soft
from recallbench.mra import (AttackConfig, TeacherAccess, build_confident_set, distill_epoch,
                             draw_mix_coefficients, joint_confidence, mix_batch, mixed_pseudo_label,
                             mixup_pair, recall_student, recall_teacher, run_mra, select_confident,
                             smooth_laplace, smoothed_target, topk_size)
from recallbench.seeding import derive_seed


def brute_force_select(joint, tau, class_count):
    """Full sort of every column by (-value, index) with K from exact rationals."""
    n = joint.shape[0]
    k = math.ceil(Fraction(str(tau)) * n / class_count)
    return {c: sorted(range(n), key=lambda i: (-joint[i, c], i))[:k] for c in range(class_count)}


def random_joint(rng, n, c, ties):
    if ties:
        return rng.integers(0, 4, size=(n, c)) / 4.0   # few levels -> many ties
    return rng.uniform(0, 1, size=(n, c))


def stochastic_rows(rng, n, c):
    return rng.dirichlet(np.ones(c), size=n)


# ---------------------------------------------------------------- formula pieces

def test_laplace_smoothing_one_hot_reference():
    y = np.eye(10)[3]
    out = smooth_laplace(y, 0.01)
    assert out[3] == pytest.approx(1.01 / 1.1, abs=1e-9) == pytest.approx(0.918181818, abs=1e-9)
    assert np.delete(out, 3) == pytest.approx([0.01 / 1.1] * 9, abs=1e-9)
    assert out.sum() == pytest.approx(1, abs=1e-12)


def test_laplace_smoothing_fixed_points():
    rng = np.random.default_rng(0)
    y = stochastic_rows(rng, 5, 4)
    assert np.array_equal(smooth_laplace(y, 0.0), y)
    assert np.allclose(smooth_laplace(np.full(4, 0.25), 0.3), 0.25)
    with pytest.raises(ValueError):
        smooth_laplace(y, -0.1)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 12)), elements=st.floats(0.01, 1)),
       st.floats(0, 1))
def test_laplace_smoothing_conserves_rows(raw, gamma):
    y = raw / raw.sum(axis=1, keepdims=True)
    out = smooth_laplace(y, gamma)
    assert np.allclose(out.sum(axis=1), 1, atol=1e-12) and (out > 0).all()


def test_mixup_endpoints_and_midpoint():
    rng = np.random.default_rng(0)
    x1, x2 = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    assert np.array_equal(mixup_pair(x1, x2, 1.0), x1)
    assert np.array_equal(mixup_pair(x1, x2, 0.0), x2)
    assert np.array_equal(mixup_pair(np.zeros((2, 2)), np.ones((2, 2)), 0.5), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        mixup_pair(x1, x2[:3], 0.5)
    with pytest.raises(ValueError):
        mixup_pair(x1, x2, 1.2)


@given(st.integers(0, 10_000), st.integers(1, 9))
def test_mixed_images_stay_in_unit_box(seed, n):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, 3, 3, 2)).astype(np.float32)
    out = mix_batch(images, rng.permutation(n), draw_mix_coefficients(0.2, n, rng))
    assert out.min() >= 0 and out.max() <= 1 and out.dtype == np.float32


def test_mix_batch_rows_match_pair_formula():
    rng = np.random.default_rng(1)
    images = rng.uniform(size=(5, 2, 2, 1)).astype(np.float32)
    partner, betas = rng.permutation(5), rng.uniform(size=5)
    out = mix_batch(images, partner, betas)
    for i in range(5):
        want = mixup_pair(images[i].astype(np.float64), images[partner[i]].astype(np.float64), betas[i])
        assert np.allclose(out[i], want, atol=1e-7)


@pytest.mark.parametrize("alpha,mean,var", [(0.2, 0.5, 1 / (4 * 1.4)), (0.75, 0.5, 0.1)])
def test_beta_draw_moments(alpha, mean, var):
    draws = draw_mix_coefficients(alpha, 200_000, np.random.default_rng(0))
    assert draws.min() >= 0 and draws.max() <= 1
    assert draws.mean() == pytest.approx(mean, abs=0.01)
    assert draws.var() == pytest.approx(var, abs=0.005)


def test_beta_draws_seeded_and_validated():
    a = draw_mix_coefficients(0.2, 5, np.random.default_rng(4))
    assert np.array_equal(a, draw_mix_coefficients(0.2, 5, np.random.default_rng(4)))
    with pytest.raises(ValueError):
        draw_mix_coefficients(0.0, 5, np.random.default_rng(0))


def test_mixed_pseudo_label_cases():
    yu, ys = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert np.array_equal(mixed_pseudo_label(yu, ys, 1.0), yu)
    assert np.allclose(mixed_pseudo_label(yu, ys, 0.5), [[0.5, 0.5]])
    y = np.array([[0.2, 0.3, 0.5]])
    assert np.allclose(mixed_pseudo_label(y, y, 0.37), y)
    per_row = mixed_pseudo_label(np.vstack([yu, yu]), np.vstack([ys, ys]), np.array([0.25, 1.0]))
    assert np.allclose(per_row, [[0.25, 0.75], [1.0, 0.0]])
    with pytest.raises(ValueError):
        mixed_pseudo_label([[0.5, 0.6]], ys, 0.5)
    with pytest.raises(ValueError):
        mixed_pseudo_label(yu, ys, 1.5)


def test_joint_confidence_examples():
    assert np.allclose(joint_confidence([[0.5, 0.5]], [[0.8, 0.2]], 0.0), [[0.40, 0.10]])
    ys = np.array([[0.1, 0.6, 0.3]])
    row = joint_confidence(np.full((1, 3), 1 / 3), ys, 0.0)
    assert np.allclose(row / row.sum(), ys)
    assert (joint_confidence([[1.0, 0.0]], [[0.0, 1.0]], 0.01) > 0).all()
    with pytest.raises(ValueError):
        joint_confidence(np.ones((2, 2)) / 2, np.ones((3, 2)) / 2, 0.0)


def test_joint_argmax_agreement_exhaustive():
    rng = np.random.default_rng(0)
    yu, ys = stochastic_rows(rng, 20_000, 5), stochastic_rows(rng, 20_000, 5)
    agree = yu.argmax(axis=1) == ys.argmax(axis=1)
    joint = joint_confidence(yu[agree], ys[agree], 0.0)
    assert agree.sum() > 1000
    assert np.array_equal(joint.argmax(axis=1), yu[agree].argmax(axis=1))


def test_topk_size_is_exact_for_decimal_fractions():
    assert topk_size(0.07, 100, 1) == 7       # 0.07 * 100 = 7.000000000000001 in floats
    assert topk_size(0.05, 400, 4) == 5
    assert topk_size(0.1, 20, 2) == 1
    assert topk_size(0.6, 7, 3) == 2
    assert topk_size(1.0, 9, 1) == 9


def test_smoothed_target_reference():
    t = smoothed_target(2, 10, 0.05)
    assert t[2] == pytest.approx(0.955) and np.delete(t, 2) == pytest.approx([0.005] * 9)
    assert t.sum() == pytest.approx(1, abs=1e-12)


# ---------------------------------------------------------------- confident selection

def test_select_confident_small_reference():
    joint = np.random.default_rng(3).uniform(size=(20, 2))
    conf = select_confident(joint, 0.1, 0.05)
    assert conf.k == 1 and conf.per_class_counts == {0: 1, 1: 1}
    assert conf.indices.tolist() == [int(joint[:, 0].argmax()), int(joint[:, 1].argmax())]


def test_select_confident_degenerate_single_class():
    conf = select_confident(np.random.default_rng(0).uniform(size=(6, 1)), 1.0, 0.0)
    assert sorted(conf.indices.tolist()) == list(range(6))


def test_select_confident_ties_prefer_lower_index():
    joint = np.array([[0.5, 0.1], [0.9, 0.2], [0.9, 0.2], [0.5, 0.2]])
    assert select_confident(joint, 0.5, 0.0).indices.tolist() == [1, 1]
    assert select_confident(joint, 1.0, 0.0).indices.tolist() == [1, 2, 1, 2]


def test_select_confident_errors():
    with pytest.raises(ConfigError):
        select_confident(np.ones((2, 3)), 0.5, 0.0)
    with pytest.raises(ConfigError):
        select_confident(np.ones((4, 2)), 0.0, 0.0)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 60), st.integers(1, 8),
       st.sampled_from([0.05, 0.1, 0.5, 0.6, 1.0]), st.booleans(), st.floats(0, 0.9))
def test_select_confident_matches_brute_force(seed, n, c, tau, ties, smoothing):
    assume(n >= c)
    joint = random_joint(np.random.default_rng(seed), n, c, ties)
    conf = select_confident(joint, tau, smoothing)
    oracle = brute_force_select(joint, tau, c)
    for cls in range(c):
        rows = conf.classes == cls
        assert conf.indices[rows].tolist() == oracle[cls]
        assert conf.per_class_counts[cls] == len(oracle[cls]) == conf.k
    assert np.allclose(conf.targets.sum(axis=1), 1, atol=1e-9)
    assert (conf.targets.argmax(axis=1) == conf.classes).all()


# ---------------------------------------------------------------- teacher access

def linear_model(seed=0, classes=3, shape=(4, 4, 3)):
    return Classifier("linear", classes, shape, seed=seed)


def test_closed_teacher_is_query_only():
    teacher = TeacherAccess(linear_model(), writable=False)
    x = np.random.default_rng(0).uniform(size=(2, 4, 4, 3)).astype(np.float32)
    with pytest.raises(CapabilityError):
        teacher.update(x, np.full((2, 3), 1 / 3))
    with pytest.raises(CapabilityError):
        teacher.export()
    with pytest.raises(CapabilityError):
        recall_teacher(teacher, linear_model(1), x, AttackConfig(topk_fraction=1.0), np.random.default_rng(0))
    teacher.assert_unchanged()


def test_tampering_with_a_closed_teacher_is_detected():
    model = linear_model()
    teacher = TeacherAccess(model, writable=False)
    with torch.no_grad():
        next(model.parameters()).add_(1.0)
    with pytest.raises(ContractViolation):
        teacher.assert_unchanged()


def test_open_teacher_needs_lr_and_zero_lr_is_identity():
    with pytest.raises(ConfigError):
        TeacherAccess(linear_model(), writable=True)
    images = np.random.default_rng(0).uniform(size=(12, 4, 4, 3)).astype(np.float32)
    teacher = TeacherAccess(linear_model(), writable=True, lr=0.0)
    before = teacher.checksum()
    cfg = AttackConfig(mode="open", lr_teacher=0.0, topk_fraction=0.5)
    recall_teacher(teacher, linear_model(1), images, cfg, np.random.default_rng(0))
    assert teacher.checksum() == before


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(mode="open")
    with pytest.raises(ConfigError):
        AttackConfig(lr_teacher=0.1)
    for bad in ({"image_mix_alpha": 0}, {"laplace_gamma": -1}, {"label_smoothing": 1.0},
                {"topk_fraction": 0}, {"outer_epochs": 0}, {"mode": "grey"}):
        with pytest.raises(ConfigError):
            AttackConfig(**bad)


# ---------------------------------------------------------------- phases

def test_warmup_targets_equal_teacher_predictions():
    images = np.random.default_rng(0).uniform(size=(10, 4, 4, 3)).astype(np.float32)
    teacher = TeacherAccess(linear_model(0), writable=False)
    student = linear_model(1)
    cfg = AttackConfig(batch_size=10)
    trace = []
    distill_epoch(teacher, student, images, cfg, 1, np.random.default_rng(0), make_optimizer(student), trace)
    mixed, targets = trace[0]
    assert np.array_equal(targets, teacher.predict(mixed))
    trace.clear()
    distill_epoch(teacher, student, images, cfg, 2, np.random.default_rng(0), make_optimizer(student), trace)
    assert not np.array_equal(trace[0][1], teacher.predict(trace[0][0]))
    teacher.assert_unchanged()


def test_distill_step_matches_hand_gradient():
    teacher_model = Classifier("linear", 2, (1, 1, 1))
    teacher_model.set_params([1.0, -1.0, 0.0, 0.0])
    student = Classifier("linear", 2, (1, 1, 1))
    w = np.array([0.2, -0.1, 0.05, 0.0])
    student.set_params(w)
    x, lr = np.full((1, 1, 1, 1), 0.6, dtype=np.float32), 0.1
    opt = make_optimizer(student, "sgd", lr, momentum=0.0, weight_decay=0.0)
    teacher = TeacherAccess(teacher_model, writable=False)
    distill_epoch(teacher, student, x, AttackConfig(batch_size=1), 1, np.random.default_rng(0), opt)
    xv = float(x.ravel()[0])  # a batch of one mixes with itself
    zt = np.array([1.0, -1.0]) * xv
    t = np.exp(zt) / np.exp(zt).sum()
    zs = w[:2] * xv + w[2:]
    p = np.exp(zs) / np.exp(zs).sum()
    g = p - t
    assert np.allclose(student.params, w - lr * np.concatenate([g * xv, g]), atol=1e-6)


def test_recall_student_descends_and_zero_lr_is_identity():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(40, 4, 4, 3)).astype(np.float32)
    model = linear_model(0)
    probs = predict_soft(model, images)
    conf = select_confident(joint_confidence(probs, probs, 0.01), 0.2, 0.05)

    def loss(m):
        p = predict_soft(m, images[conf.indices])
        return float(-(conf.targets * np.log(p)).sum(axis=1).mean())

    student = linear_model(1)
    frozen = student.clone()
    recall_student(frozen, conf, images, make_optimizer(frozen, "adamw", 0.0), 8, rng)
    assert frozen.checksum() == student.checksum()
    before = loss(student)
    recall_student(student, conf, images, make_optimizer(student, "sgd", 0.05, momentum=0.0), 100, rng)
    assert loss(student) <= before


def test_teacher_recall_recomputes_its_confident_set():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(30, 4, 4, 3)).astype(np.float32)
    cfg = AttackConfig(mode="open", lr_teacher=0.01, topk_fraction=0.2)
    teacher = TeacherAccess(linear_model(0), writable=True, lr=0.01)
    student = linear_model(1)
    stale = build_confident_set(teacher, student, images, cfg)
    recall_student(student, stale, images, make_optimizer(student, "adamw", 0.05), 64, rng)
    fresh = build_confident_set(teacher, student, images, cfg)
    _, used = recall_teacher(teacher, student, images, cfg, rng)
    assert np.array_equal(used.indices, fresh.indices)


def test_attack_interface_takes_images_only():
    params = set(inspect.signature(run_mra).parameters)
    assert params == {"teacher", "student_arch", "images", "cfg", "student_options", "monitor"}


def ulm_checkpoint(seed=0):
    return Checkpoint.from_classifier(linear_model(seed), "ULM")


@pytest.mark.parametrize("mode", ["closed", "open"])
def test_run_mra_is_deterministic_and_monitor_free(mode):
    images = np.random.default_rng(0).uniform(size=(24, 4, 4, 3)).astype(np.float32)
    lr_t = 0.01 if mode == "open" else None
    cfg = AttackConfig(mode=mode, lr_teacher=lr_t, outer_epochs=2, topk_fraction=0.25, batch_size=8, seed=5)
    seen = []
    a = run_mra(TeacherAccess.from_checkpoint(ulm_checkpoint(), mode, lr_t), "linear", images, cfg,
                monitor=lambda rec, model: seen.append(rec["phase"]) or {"probe": model.checksum()[:6]})
    b = run_mra(TeacherAccess.from_checkpoint(ulm_checkpoint(), mode, lr_t), "linear", images, cfg)
    assert a.rcm.params.tobytes() == b.rcm.params.tobytes()
    assert np.array_equal(a.recalled_labels, b.recalled_labels)
    assert a.rcm.role == "RCM"
    expected = ["distill", "recall_student"] + (["recall_teacher"] if mode == "open" else [])
    assert seen == expected * 2
    assert all("probe" in r for r in a.history)
    assert np.array_equal(a.recalled_labels, predict_soft(a.rcm.to_classifier(), images).argmax(axis=1))


def test_closed_attack_leaves_teacher_bit_identical():
    ulm = ulm_checkpoint()
    teacher = TeacherAccess.from_checkpoint(ulm, "closed")
    images = np.random.default_rng(1).uniform(size=(24, 4, 4, 3)).astype(np.float32)
    run_mra(teacher, "smallcnn", images, AttackConfig(outer_epochs=2, topk_fraction=0.5, batch_size=8),
            student_options={"width": 3})
    assert teacher.checksum() == ulm.to_classifier().checksum()


def test_distill_only_with_zero_lr_returns_the_initial_student():
    images = np.random.default_rng(2).uniform(size=(16, 4, 4, 3)).astype(np.float32)
    cfg = AttackConfig(outer_epochs=1, student_recall=False, lr_student=0.0, seed=9)
    result = run_mra(TeacherAccess.from_checkpoint(ulm_checkpoint(), "closed"), "linear", images, cfg)
    init = Classifier("linear", 3, (4, 4, 3), seed=derive_seed(9, "student-init"))
    assert np.array_equal(predict_soft(result.rcm.to_classifier(), images), predict_soft(init, images))
    assert [r["phase"] for r in result.history] == ["distill"]


def test_run_mra_argument_errors():
    images = np.zeros((0, 4, 4, 3), dtype=np.float32)
    with pytest.raises(ConfigError):
        run_mra(TeacherAccess.from_checkpoint(ulm_checkpoint()), "linear", images, AttackConfig())
    images = np.zeros((8, 4, 4, 3), dtype=np.float32)
    with pytest.raises(ConfigError):
        run_mra(TeacherAccess.from_checkpoint(ulm_checkpoint()), "linear", images,
                AttackConfig(mode="open", lr_teacher=0.1))
    with pytest.raises(ConfigError):
        distill_epoch(TeacherAccess(linear_model()), linear_model(classes=4), images, AttackConfig(), 1,
                      np.random.default_rng(0), None)


def test_module_never_imports_dataset_types():
    assert "LabeledDataset" not in vars(mra) and "SplitBundle" not in vars(mra)
