import math
from itertools import combinations

import numpy as np
import pytest

from prunekit import autodiff as ad
from prunekit.autodiff import Tensor, grad_check
from prunekit.errors import ConfigError, ContractError
from prunekit.task import (
    PowersetSpec,
    frame_error_rate,
    generate_dataset,
    powerset_classes,
    task_loss,
)


class TestPowersetClasses:
    def test_default_spec_has_11_classes(self):
        assert len(powerset_classes(PowersetSpec(4, 2))) == 11

    def test_silence_only(self):
        assert powerset_classes(PowersetSpec(4, 0)) == [()]

    def test_two_speakers_full_overlap(self):
        assert powerset_classes(PowersetSpec(2, 2)) == [(), (0,), (1,), (0, 1)]

    def test_ordering_by_size_then_lexicographic(self):
        classes = powerset_classes(PowersetSpec(3, 2))
        assert classes == [(), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2)]

    def test_overlap_exceeding_speakers_rejected(self):
        with pytest.raises(ConfigError):
            PowersetSpec(2, 3)

    def test_count_formula_by_brute_force(self):
        for k in range(1, 7):
            for m in range(0, k + 1):
                classes = powerset_classes(PowersetSpec(k, m))
                brute = [s for size in range(k + 1) for s in combinations(range(k), size)
                         if len(s) <= m]
                assert len(classes) == len(brute) == sum(math.comb(k, j) for j in range(m + 1))


class TestGenerateDataset:
    def test_deterministic(self):
        a = generate_dataset(3, 4, 400)
        b = generate_dataset(3, 4, 400)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.signal.data, sb.signal.data)
            assert np.array_equal(sa.labels, sb.labels)

    def test_labels_within_powerset(self):
        spec = PowersetSpec(4, 2)
        for s in generate_dataset(9, 16, 400, spec):
            assert s.labels.min() >= 0
            assert s.labels.max() < spec.n_classes

    def test_overlap_never_exceeded(self):
        spec = PowersetSpec(4, 2)
        for s in generate_dataset(5, 16, 400, spec):
            assert s.activity.sum(axis=0).max() <= spec.max_overlap

    def test_frame_count_matches_conv_chain(self):
        samples = generate_dataset(1, 2, 400)
        assert len(samples[0].labels) == 19  # ((400-10)//5+1 -> 79 -> 39 -> 19)

    def test_too_short_utterance_rejected(self):
        with pytest.raises(ConfigError):
            generate_dataset(0, 1, 20)

    def test_no_activity_labels_empty_class(self):
        spec = PowersetSpec(4, 2)
        sample = generate_dataset(2, 1, 400, spec)[0]
        silent = sample.activity.sum(axis=0) == 0
        frames_all_silent = [
            t for t in range(len(sample.labels)) if silent[t * 20 : (t + 1) * 20].all()
        ]
        assert frames_all_silent, "fixture needs at least one silent frame"
        for t in frames_all_silent:
            assert sample.labels[t] == 0


class TestTaskLoss:
    def test_confident_correct_is_near_zero(self):
        labels = np.array([0, 3, 7])
        logits = np.full((3, 11), -50.0)
        logits[np.arange(3), labels] = 50.0
        assert float(task_loss(Tensor(logits), labels).data) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits_give_log_classes(self):
        labels = np.array([1, 5, 9, 0])
        loss = task_loss(Tensor(np.zeros((4, 11))), labels)
        assert float(loss.data) == pytest.approx(math.log(11.0), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            task_loss(Tensor(np.zeros((2, 11))), np.array([0, 11]))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            task_loss(Tensor(np.zeros((2, 11))), np.array([0, 1, 2]))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 11, 6)
        err = grad_check(lambda v: task_loss(v, labels), Tensor(rng.normal(size=(6, 11))))
        assert err <= 1e-6


class TestFrameErrorRate:
    def test_perfect(self):
        labels = np.array([0, 1, 2])
        logits = np.full((3, 4), -10.0)
        logits[np.arange(3), labels] = 10.0
        assert frame_error_rate(logits, labels) == 0.0

    def test_constant_wrong_class(self):
        labels = np.array([0, 1, 0, 2, 0])
        logits = np.zeros((5, 4))
        logits[:, 3] = 10.0  # always predict class 3
        assert frame_error_rate(logits, labels) == 1.0
        labels2 = np.array([3, 1, 3, 3, 0])
        assert frame_error_rate(logits, labels2) == pytest.approx(2.0 / 5.0)

    def test_random_logits_near_chance(self):
        rng = np.random.default_rng(11)
        n_classes = 11
        errs = []
        for _ in range(200):
            labels = rng.integers(0, n_classes, 50)
            errs.append(frame_error_rate(rng.normal(size=(50, n_classes)), labels))
        assert np.mean(errs) == pytest.approx(1.0 - 1.0 / n_classes, abs=0.02)
