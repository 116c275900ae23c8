import numpy as np
import pytest

from prunekit import autodiff as ad
from prunekit.autodiff import Tensor, backward, grad_check
from prunekit.distill import DistillConfig, distill_loss
from prunekit.errors import ConfigError, ContractError


def stacks(rng, n_layers=3, t=5, d=8):
    return [rng.normal(size=(t, d)) for _ in range(n_layers + 1)]


def test_identical_stacks_give_minus_layers_times_frames():
    rng = np.random.default_rng(0)
    teacher = stacks(rng, n_layers=3, t=5, d=8)
    student = [Tensor(h.copy(), requires_grad=True) for h in teacher]
    cfg = DistillConfig.build(8, 3, layer_set=(0, 2, 3))
    loss = distill_loss(teacher, student, cfg)
    assert float(loss.data) == pytest.approx(-3 * 5, abs=1e-9)


def test_doubled_student_hand_algebra():
    # 2-dim example: student = 2 * teacher, identity projection:
    # cosine term 1 per frame, L1 term mean |h| per frame
    teacher = [np.array([[3.0, -4.0], [1.0, 2.0]])]
    student = [Tensor(2.0 * teacher[0], requires_grad=True)]
    cfg = DistillConfig.build(2, 0, layer_set=(0,))
    loss = distill_loss(teacher, student, cfg)
    l1 = np.abs(teacher[0]).mean(axis=1).sum()
    assert float(loss.data) == pytest.approx(l1 - 2.0, abs=1e-9)


def test_minimum_reached_only_at_exact_match():
    rng = np.random.default_rng(1)
    teacher = stacks(rng, 2, 4, 6)
    cfg = DistillConfig.build(6, 2, layer_set=(0, 1, 2))
    exact = [Tensor(h.copy()) for h in teacher]
    perturbed = [Tensor(h + 0.01 * rng.normal(size=h.shape)) for h in teacher]
    assert float(distill_loss(teacher, exact, cfg).data) == pytest.approx(-12.0, abs=1e-9)
    assert float(distill_loss(teacher, perturbed, cfg).data) > -12.0


def test_teacher_receives_no_gradient():
    rng = np.random.default_rng(2)
    teacher_tensors = [Tensor(h, requires_grad=True) for h in stacks(rng, 2, 4, 6)]
    student = [Tensor(h.data + 0.1, requires_grad=True) for h in teacher_tensors]
    cfg = DistillConfig.build(6, 2, layer_set=(0, 2))
    backward(distill_loss(teacher_tensors, student, cfg))
    assert all(h.grad is None for h in teacher_tensors)
    assert any(h.grad is not None for h in student)


def test_zero_student_vector_stays_finite():
    teacher = [np.ones((3, 4))]
    student = [Tensor(np.zeros((3, 4)), requires_grad=True)]
    cfg = DistillConfig.build(4, 0, layer_set=(0,))
    loss = distill_loss(teacher, student, cfg)
    # cosine of a zeroed hidden is defined as 0, leaving only the L1 term
    assert float(loss.data) == pytest.approx(3 * 1.0, abs=1e-9)
    backward(loss)
    assert np.all(np.isfinite(student[0].grad))


def test_frame_count_mismatch_rejected():
    cfg = DistillConfig.build(4, 0, layer_set=(0,))
    with pytest.raises(ContractError):
        distill_loss([np.ones((3, 4))], [Tensor(np.ones((2, 4)))], cfg)


def test_layer_set_validation():
    with pytest.raises(ConfigError):
        DistillConfig.build(4, 2, layer_set=(0, 5))


def test_projections_initialized_to_identity():
    cfg = DistillConfig.build(6, 6)
    assert set(cfg.layer_set) == {0, 2, 4, 6}
    for w in cfg.projections.values():
        assert np.array_equal(w.data, np.eye(6))


def test_grad_matches_finite_differences_through_student_and_projection():
    rng = np.random.default_rng(3)
    teacher = stacks(rng, 1, 3, 5)
    cfg = DistillConfig.build(5, 1, layer_set=(0, 1))
    h1 = rng.normal(size=(3, 5))

    def loss_of_student(v):
        return distill_loss(teacher, [v, Tensor(h1)], cfg)

    err = grad_check(loss_of_student, Tensor(rng.normal(size=(3, 5))))
    assert err <= 1e-5

    s0, s1 = Tensor(rng.normal(size=(3, 5))), Tensor(h1)

    def loss_of_projection(w):
        probe = DistillConfig(cfg.layer_set, {0: w, 1: cfg.projections[1]})
        return distill_loss(teacher, [s0, s1], probe)

    err = grad_check(loss_of_projection, Tensor(np.eye(5) + 0.1 * rng.normal(size=(5, 5))))
    assert err <= 1e-5
