"""Distillation loss, teacher mechanics, and consensus categories."""

import numpy as np
import pytest

import concordrl.autodiff as ad
from concordrl import consensus as cs
from concordrl.rng import stream
from fixtures import run_emergence
from oracles import check_grads, consensus_loss_ref, softmax_ref


def small_head(input_dim=4, categories=2, hidden=(), seed=0, **kwargs):
    cfg = cs.ConsensusConfig(input_dim=input_dim, categories=categories, hidden=hidden, **kwargs)
    return cs.ConsensusHead(cfg, stream(seed, "head")), cfg


# ---------------------------------------------------------------------------
# loss vs brute force


def test_pairwise_loss_matches_brute_force():
    r = np.random.default_rng(0)
    for trial in range(10):
        n, k = int(r.integers(1, 6)), int(r.integers(1, 5))
        t = softmax_ref(r.normal(size=(n, k)))
        s = softmax_ref(r.normal(size=(n, k)))
        got = cs.pairwise_consensus_loss(t, s).item()
        want = consensus_loss_ref(t, s)
        assert abs(got - want) <= 1e-10


def test_pairwise_loss_excluding_self_pairs():
    r = np.random.default_rng(1)
    for trial in range(5):
        n, k = int(r.integers(2, 6)), int(r.integers(2, 5))
        t = softmax_ref(r.normal(size=(n, k)))
        s = softmax_ref(r.normal(size=(n, k)))
        got = cs.pairwise_consensus_loss(t, s, include_self_pairs=False).item()
        want = consensus_loss_ref(t, s, include_self_pairs=False)
        assert abs(got - want) <= 1e-10
    with pytest.raises(ad.AutodiffError):
        cs.pairwise_consensus_loss(t[:1], s[:1], include_self_pairs=False)


def test_loss_zero_for_perfect_one_hot_self_distillation():
    t = np.array([[1.0, 0.0]])
    s = np.array([[1.0, 0.0]])
    assert cs.pairwise_consensus_loss(t, s).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_invariant_to_view_permutation():
    head, _ = small_head(hidden=(8,), seed=2)
    views = np.random.default_rng(3).normal(size=(4, 4))
    perm = np.random.default_rng(4).permutation(4)
    a = cs.consensus_loss(head, views).item()
    b = cs.consensus_loss(head, views[perm]).item()
    assert abs(a - b) < 1e-10


def test_loss_nonnegative_and_finite():
    head, _ = small_head(hidden=(8,), categories=3, seed=5)
    views = np.random.default_rng(6).normal(size=(5, 4)) * 3.0
    loss = cs.consensus_loss(head, views).item()
    assert np.isfinite(loss) and loss >= 0.0


def test_empty_batch_rejected():
    head, _ = small_head(seed=7)
    with pytest.raises(ad.AutodiffError):
        cs.consensus_loss(head, np.zeros((0, 4)))


def test_loss_gradient_matches_finite_differences():
    # 2 views, K = 2, width-4 inputs: the documented gradient check instance
    head, _ = small_head(input_dim=4, categories=2, hidden=(4,), seed=8)
    views = np.random.default_rng(9).normal(size=(2, 4))
    leaves = [head.student[n] for n in head.student.names()]
    check_grads(lambda: cs.consensus_loss(head, views), leaves)


def test_teacher_receives_no_gradient():
    head, _ = small_head(hidden=(8,), seed=10)
    views = np.random.default_rng(11).normal(size=(3, 4))
    ad.backward(cs.consensus_loss(head, views))
    for _, p in head.teacher.items():
        assert np.all(p.grad == 0.0)
    assert any(np.any(p.grad != 0.0) for _, p in head.student.items())


# ---------------------------------------------------------------------------
# distributions


def test_student_distribution_single_category_is_one():
    head, _ = small_head(categories=1, seed=12)
    out = cs.student_distribution(head, np.zeros((3, 4))).values
    np.testing.assert_array_equal(out, np.ones((3, 1)))


def test_student_distribution_identical_rows_identical_outputs():
    head, _ = small_head(hidden=(8,), seed=13)
    row = np.random.default_rng(14).normal(size=4)
    out = cs.student_distribution(head, np.stack([row, row])).values
    np.testing.assert_array_equal(out[0], out[1])


def test_student_distribution_hand_set_linear_head():
    head, _ = small_head(input_dim=2, categories=2, hidden=(), seed=15,
                         student_temp=1.0, teacher_temp=1.0)
    w = np.array([[0.3, -0.2], [0.1, 0.4]])
    b = np.array([0.05, -0.1])
    head.student["consensus/w0"].values[...] = w
    head.student["consensus/b0"].values[...] = b
    x = np.array([[1.0, 0.0]])
    got = cs.student_distribution(head, x).values
    np.testing.assert_allclose(got, softmax_ref(x @ w + b), atol=1e-12)


def test_teacher_distribution_uniform_when_center_equals_logits():
    head, cfg = small_head(hidden=(8,), categories=3, seed=16)
    views = np.random.default_rng(17).normal(size=(1, 4))
    head.center = cs.teacher_logits(head, views)[0].copy()
    out = cs.teacher_distribution(head, views)
    np.testing.assert_allclose(out, np.full((1, 3), 1.0 / 3.0), atol=1e-12)


def test_teacher_sharpening_concentrates_on_argmax():
    head, _ = small_head(input_dim=2, categories=3, hidden=(), seed=18,
                         student_temp=1.0, teacher_temp=0.02)
    head.teacher["consensus/w0"].values[...] = 0.0
    head.teacher["consensus/b0"].values[...] = np.array([0.1, 0.6, 0.3])
    out = cs.teacher_distribution(head, np.zeros((1, 2)))
    assert np.argmax(out[0]) == 1
    assert out[0, 1] > 0.99


def test_teacher_distribution_hand_set_center_oracle():
    head, _ = small_head(input_dim=2, categories=2, hidden=(), seed=19,
                         student_temp=0.5, teacher_temp=0.5)
    head.teacher["consensus/w0"].values[...] = np.array([[1.0, 0.0], [0.0, 1.0]])
    head.teacher["consensus/b0"].values[...] = 0.0
    head.center = np.array([0.2, -0.1])
    x = np.array([[0.4, 0.7]])
    want = softmax_ref((x - head.center) / 0.5)
    np.testing.assert_allclose(cs.teacher_distribution(head, x), want, atol=1e-12)


def test_teacher_distribution_is_off_tape():
    head, _ = small_head(hidden=(8,), seed=20)
    probs = cs.teacher_distribution(head, np.zeros((2, 4)))
    assert isinstance(probs, np.ndarray)


# ---------------------------------------------------------------------------
# categories


def test_category_single_k_always_zero():
    head, _ = small_head(categories=1, seed=21)
    assert cs.consensus_category(head, np.ones(4)) == 0


def test_category_argmax_and_tie_break():
    assert int(np.argmax(np.array([0.1, 0.7, 0.2]))) == 1
    head, _ = small_head(input_dim=2, categories=2, hidden=(), seed=22)
    head.student["consensus/w0"].values[...] = 0.0
    head.student["consensus/b0"].values[...] = 0.0  # exact tie (0.5, 0.5)
    assert cs.consensus_category(head, np.array([1.0, 1.0])) == 0


def test_categories_batch_matches_single():
    head, _ = small_head(hidden=(8,), categories=3, seed=23)
    views = np.random.default_rng(24).normal(size=(6, 4))
    batch = cs.consensus_categories(head, views)
    singles = [cs.consensus_category(head, v) for v in views]
    np.testing.assert_array_equal(batch, singles)


# ---------------------------------------------------------------------------
# teacher updates


def test_update_teacher_identity_when_both_momenta_one():
    head, _ = small_head(hidden=(8,), seed=25,
                         teacher_momentum=1.0, center_momentum=1.0)
    before = head.state()
    cs.update_teacher(head, np.ones((3, 2)))
    after = head.state()
    for name in before["teacher"]:
        np.testing.assert_array_equal(before["teacher"][name], after["teacher"][name])
    np.testing.assert_array_equal(before["center"], after["center"])


def test_update_teacher_momentum_zero_copies_student():
    head, _ = small_head(hidden=(8,), seed=26)
    for _, p in head.student.items():
        p.values += 0.5
    cs.update_teacher(head, np.zeros((1, 2)), momentum=0.0)
    for name, p in head.teacher.items():
        np.testing.assert_array_equal(p.values, head.student[name].values)


def test_center_single_step_arithmetic():
    head, _ = small_head(seed=27, center_momentum=0.9)
    assert np.all(head.center == 0.0)
    cs.update_teacher(head, np.ones((4, 2)), momentum=1.0)
    np.testing.assert_allclose(head.center, [0.1, 0.1], atol=1e-15)


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_bad_values():
    with pytest.raises(ad.AutodiffError):
        cs.ConsensusConfig(input_dim=4, categories=0)
    with pytest.raises(ad.AutodiffError):
        cs.ConsensusConfig(input_dim=4, categories=2, student_temp=0.0)
    with pytest.raises(ad.AutodiffError):
        cs.ConsensusConfig(input_dim=4, categories=2, student_temp=0.04, teacher_temp=0.1)
    with pytest.raises(ad.AutodiffError):
        cs.ConsensusConfig(input_dim=4, categories=2, teacher_momentum=1.2)


def test_views_width_checked():
    head, _ = small_head(seed=28)
    with pytest.raises(ad.AutodiffError):
        cs.student_distribution(head, np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# emergence smoke (single seed; the acceptance suite runs 5)


def test_agreement_emerges_on_synthetic_task():
    init, final = run_emergence(seed=0)
    assert init[0] < 0.6, f"init agreement {init[0]:.3f} not near chance"
    assert final[0] > 0.9, f"trained agreement {final[0]:.3f} too low"
    assert final[1] > 0.0, "category usage collapsed"
