import math

import numpy as np
import pytest

from prunekit import autodiff as ad
from prunekit import gates as G
from prunekit.autodiff import Tensor, backward
from prunekit.errors import ConfigError, ContractError

CFG = G.GateConfig()


def group_with(log_alpha):
    arr = np.atleast_1d(np.asarray(log_alpha, dtype=np.float64))
    g = G.make_group(G.FFN_DIM, 0, arr.size, 100)
    g.log_alpha.data = arr
    return g


class TestGateConfig:
    def test_defaults(self):
        assert CFG.beta == pytest.approx(2.0 / 3.0)
        assert CFG.gamma == -0.1 and CFG.zeta == 1.1

    def test_invalid_stretch(self):
        with pytest.raises(ConfigError):
            G.GateConfig(gamma=0.1)
        with pytest.raises(ConfigError):
            G.GateConfig(zeta=0.9)
        with pytest.raises(ConfigError):
            G.GateConfig(beta=-1.0)


class TestSampleGates:
    def test_median_noise_is_half_at_zero_alpha(self):
        g = group_with([0.0])
        s = G.sample_gates(g, CFG, np.array([0.5]))
        assert s.mode == G.STOCHASTIC
        assert s.z.data[0] == pytest.approx(0.5, abs=1e-12)

    def test_saturated_low_alpha_clamps_to_zero(self):
        g = group_with([-30.0] * 4)
        s = G.sample_gates(g, CFG, np.array([0.2, 0.4, 0.6, 0.8]))
        assert np.all(s.z.data == 0.0)

    def test_extreme_noise_rejected(self):
        g = group_with([0.0, 0.0])
        with pytest.raises(ContractError):
            G.sample_gates(g, CFG, np.array([0.0, 0.5]))
        with pytest.raises(ContractError):
            G.sample_gates(g, CFG, np.array([0.5, 1.0]))

    def test_samples_stay_in_unit_interval(self):
        rng = np.random.default_rng(0)
        g = group_with(rng.normal(0, 4, 64))
        for _ in range(50):
            u = np.clip(rng.random(64), 1e-12, 1 - 1e-12)
            z = G.sample_gates(g, CFG, u).z.data
            assert np.all(z >= 0.0) and np.all(z <= 1.0)

    def test_gradient_reaches_log_alpha_through_open_region(self):
        g = group_with([0.0, 0.0])
        s = G.sample_gates(g, CFG, np.array([0.5, 0.5]))
        backward(ad.tsum(s.z))
        assert g.log_alpha.grad is not None
        assert np.all(g.log_alpha.grad > 0.0)

    def test_monte_carlo_open_rate_matches_prob_open(self):
        rng = np.random.default_rng(7)
        n = 10**5
        g = group_with([1.0])
        hits = 0
        chunk = 10**4
        for _ in range(n // chunk):
            gc = group_with([1.0] * chunk)
            u = np.clip(rng.random(chunk), 1e-12, 1 - 1e-12)
            hits += int((G.sample_gates(gc, CFG, u).z.data > 0).sum())
        assert hits / n == pytest.approx(float(G.prob_open(1.0, CFG)), abs=5e-3)


class TestDeterministicGates:
    def test_zero_alpha_gives_half(self):
        s = G.deterministic_gates(group_with([0.0]), CFG)
        assert s.mode == G.DETERMINISTIC
        assert s.z.data[0] == pytest.approx(0.5, abs=1e-12)

    def test_prune_threshold_matches_log_one_eleventh(self):
        assert G.prune_threshold(CFG) == pytest.approx(math.log(1.0 / 11.0), abs=1e-9)
        eps = 1e-6
        below = G.deterministic_gates(group_with([math.log(1 / 11) - eps]), CFG).z.data[0]
        above = G.deterministic_gates(group_with([math.log(1 / 11) + eps]), CFG).z.data[0]
        assert below == 0.0 and above > 0.0

    def test_large_alpha_clamps_to_one(self):
        s = G.deterministic_gates(group_with([30.0]), CFG)
        assert s.z.data[0] == 1.0

    def test_monotone_in_log_alpha(self):
        grid = np.linspace(-6, 6, 101)
        z = G.deterministic_gates(group_with(grid), CFG).z.data
        assert np.all(np.diff(z) >= 0.0)


class TestProbOpen:
    def test_value_at_zero(self):
        # sigmoid((2/3) * log 11) with the default stretch
        expected = 1.0 / (1.0 + math.exp(-(2.0 / 3.0) * math.log(11.0)))
        assert float(G.prob_open(0.0, CFG)) == pytest.approx(expected, abs=1e-12)
        assert float(G.prob_open(0.0, CFG)) == pytest.approx(0.8318, abs=5e-4)

    def test_limits(self):
        assert float(G.prob_open(-60.0, CFG)) == pytest.approx(0.0, abs=1e-12)
        assert float(G.prob_open(60.0, CFG)) == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_agreement_across_alphas(self):
        rng = np.random.default_rng(3)
        n = 10**5
        for la in (-3.0, -1.0, 0.0, 1.0, 3.0):
            g = group_with([la] * n)
            u = np.clip(rng.random(n), 1e-12, 1 - 1e-12)
            frac = float((G.sample_gates(g, CFG, u).z.data > 0).mean())
            assert frac == pytest.approx(float(G.prob_open(la, CFG)), abs=5e-3)


class TestExpectedRemainingParams:
    def test_all_open(self):
        g = group_with([60.0] * 4)
        out = G.expected_remaining_params([g], CFG, fixed_params=10)
        assert float(out.data) == pytest.approx(10 + 4 * 100, rel=1e-9)

    def test_all_closed(self):
        g = group_with([-60.0] * 4)
        out = G.expected_remaining_params([g], CFG, fixed_params=10)
        assert float(out.data) == pytest.approx(10.0, abs=1e-6)

    def test_empty_group_list(self):
        out = G.expected_remaining_params([], CFG, fixed_params=42)
        assert float(out.data) == 42.0

    def test_four_units_at_zero_alpha(self):
        g = group_with([0.0] * 4)
        out = G.expected_remaining_params([g], CFG, fixed_params=0)
        assert float(out.data) == pytest.approx(4 * 100 * 0.8318, abs=0.5)

    def test_gradient_positive_everywhere(self):
        rng = np.random.default_rng(1)
        g = group_with(rng.normal(0, 3, 32))
        out = G.expected_remaining_params([g], CFG, fixed_params=5)
        backward(out)
        assert np.all(g.log_alpha.grad > 0.0)


def test_keep_probability_centers_on_prune_threshold():
    t0 = G.prune_threshold(CFG)
    assert float(G.keep_probability(t0, CFG)) == pytest.approx(0.5, abs=1e-12)
    assert float(G.keep_probability(t0 + 5.0, CFG)) > 0.99
    assert float(G.keep_probability(t0 - 5.0, CFG)) < 0.01


def test_group_validation():
    with pytest.raises(ConfigError):
        G.GateGroup("bogus", 0, Tensor(np.zeros(3), requires_grad=True), 10)
    with pytest.raises(ConfigError):
        G.GateGroup(G.FFN_DIM, 0, Tensor(np.array([np.inf, 0.0]), requires_grad=True), 10)
    with pytest.raises(ConfigError):
        G.make_group(G.FFN_DIM, 0, 0, 10)


def test_checkpoint_tensor_name():
    g = G.make_group(G.ATTENTION_HEAD, 3, 4, 4144)
    assert g.name == "gates/attention_head/3/log_alpha"
