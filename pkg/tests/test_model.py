import numpy as np
import pytest

from prunekit import autodiff as ad
from prunekit import gates as G
from prunekit import model as M
from prunekit.autodiff import Tensor, backward, no_grad
from prunekit.errors import ConfigError, ContractError, ShapeError
from prunekit.rng import substream

MICRO = M.EncoderConfig(conv_layers=((8, 6, 3), (8, 3, 2)), d_model=16,
                        n_layers=2, n_heads=2, ffn_dim=24)


def micro_encoder(seed=0):
    return M.build(MICRO, seed)


def signal(seed=0, n=120):
    return Tensor(substream(seed, "sig").normal(size=(1, n)))


class TestBuild:
    def test_same_seed_same_parameters(self):
        a, b = M.build(MICRO, 5), M.build(MICRO, 5)
        for (na, pa), (nb, pb) in zip(M.named_parameters(a).items(),
                                      M.named_parameters(b).items()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a, b = M.build(MICRO, 5), M.build(MICRO, 6)
        assert not np.array_equal(a.proj_w.data, b.proj_w.data)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            M.EncoderConfig(d_model=64, n_heads=3)

    def test_total_params_matches_per_tensor_enumeration(self):
        enc = M.build(M.EncoderConfig(), 3)
        total, prunable, remaining = M.count_params(enc)
        by_enumeration = sum(int(np.prod(p.data.shape)) for p in
                             M.named_parameters(enc).values())
        assert total == by_enumeration == remaining
        assert prunable == sum(g.num_units * g.params_per_unit for g in enc.gate_groups)

    def test_param_count_identity(self):
        # prunable partition plus fixed leftovers covers every tensor exactly
        enc = micro_encoder()
        total, prunable, _ = M.count_params(enc)
        assert 0 < prunable < total

    def test_gates_initialized_open(self):
        enc = micro_encoder()
        for g in enc.gate_groups:
            assert np.all(g.log_alpha.data == 2.0)
            assert float(G.prob_open(2.0, G.GateConfig())) > 0.97


class TestForward:
    def test_all_ones_gates_equal_no_gates(self):
        enc = micro_encoder()
        ones = {(g.kind, g.layer_index): Tensor(np.ones(g.num_units))
                for g in enc.gate_groups}
        with no_grad():
            _, a = M.forward(enc, signal())
            _, b = M.forward(enc, signal(), ones)
        assert np.array_equal(a.data, b.data)

    def test_zeroed_head_gate_equals_zeroed_slices(self):
        enc = micro_encoder(seed=3)
        dh = enc.layers[0].head_dim
        gates = {(G.ATTENTION_HEAD, 0): Tensor(np.array([0.0, 1.0]))}
        with no_grad():
            _, gated = M.forward(enc, signal(), gates)
        sliced = M.build(MICRO, 3)
        cols = slice(0, dh)
        for w in (sliced.layers[0].wq, sliced.layers[0].wk, sliced.layers[0].wv):
            w.data[:, cols] = 0.0
        for b in (sliced.layers[0].bq, sliced.layers[0].bk, sliced.layers[0].bv):
            b.data[cols] = 0.0
        sliced.layers[0].wo.data[cols, :] = 0.0
        with no_grad():
            _, manual = M.forward(sliced, signal())
        assert np.allclose(gated.data, manual.data, atol=1e-12)

    def test_one_hot_layer_weights_select_single_hidden(self):
        enc = micro_encoder()
        enc.layer_weights.data = np.array([0.0, 40.0, 0.0])
        with no_grad():
            hiddens, ws = M.forward(enc, signal())
        assert np.allclose(ws.data, hiddens[1].data, atol=1e-6)

    def test_hidden_stack_shapes(self):
        enc = micro_encoder()
        with no_grad():
            hiddens, ws = M.forward(enc, signal(n=150))
        t = M.frames_out(MICRO.conv_layers, 150)
        assert len(hiddens) == MICRO.n_layers + 1
        assert all(h.shape == (t, MICRO.d_model) for h in hiddens)
        assert ws.shape == (t, MICRO.d_model)

    def test_signal_too_short(self):
        enc = micro_encoder()
        with pytest.raises(ShapeError):
            with no_grad():
                M.forward(enc, Tensor(np.zeros((1, 4))))

    def test_gate_length_mismatch(self):
        enc = micro_encoder()
        bad = {(G.FFN_DIM, 0): Tensor(np.ones(7))}
        with pytest.raises(ContractError):
            with no_grad():
                M.forward(enc, signal(), bad)

    def test_ffn_gate_linearity(self):
        # gating the intermediate activation == scaling the down-projection rows
        enc = micro_encoder(seed=9)
        g = substream(4, "g").uniform(0.2, 1.0, MICRO.ffn_dim)
        gates = {(G.FFN_DIM, 0): Tensor(g)}
        with no_grad():
            _, gated = M.forward(enc, signal(), gates)
        scaled = M.build(MICRO, 9)
        scaled.layers[0].w_down.data *= g[:, None]
        with no_grad():
            _, manual = M.forward(scaled, signal())
        assert np.allclose(gated.data, manual.data, atol=1e-9)

    def test_weighted_sum_weights_sum_to_one(self):
        enc = micro_encoder()
        w = ad.softmax(enc.layer_weights, axis=0)
        assert float(w.data.sum()) == pytest.approx(1.0, abs=1e-12)


class TestFrameArithmetic:
    def test_frame_count_property_100_random_lengths(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            layers = []
            for _ in range(int(rng.integers(1, 4))):
                layers.append((int(rng.integers(1, 8)), int(rng.integers(1, 6)),
                               int(rng.integers(1, 4))))
            n = int(rng.integers(M.min_input_length(layers), 400))
            # direct simulation of the floor chain
            t = n
            for _, w, s in layers:
                t = (t - w) // s + 1
            assert M.frames_out(layers, n) == t

    def test_min_input_length_is_tight(self):
        layers = M.EncoderConfig().conv_layers
        n = M.min_input_length(layers)
        assert M.frames_out(layers, n) == 1
        with pytest.raises(ShapeError):
            M.frames_out(layers, n - 1)

    def test_default_total_stride(self):
        assert M.total_stride(M.EncoderConfig().conv_layers) == 20


class TestCountParams:
    def test_head_removal_drops_exact_slice_size(self):
        from prunekit.compactor import PruneMask

        enc = M.build(M.EncoderConfig(), 1)
        total, _, _ = M.count_params(enc)
        mask = _full_mask_dict(enc)
        mask.entries[(G.ATTENTION_HEAD, 2)] = ([0, 1, 2], np.ones(3))
        _, _, remaining = M.count_params(enc, mask)
        assert total - remaining == 3 * (64 * 16 + 16) + 64 * 16  # 4144

    def test_ffn_dim_removal_drops_exact_slice_size(self):
        enc = M.build(M.EncoderConfig(), 1)
        total, _, _ = M.count_params(enc)
        mask = _full_mask_dict(enc)
        kept = list(range(1, 256))
        mask.entries[(G.FFN_DIM, 0)] = (kept, np.ones(255))
        _, _, remaining = M.count_params(enc, mask)
        assert total - remaining == 2 * 64 + 1  # 129

    def test_inconsistent_mask_rejected(self):
        enc = micro_encoder()
        mask = _full_mask_dict(enc)
        mask.entries[(G.FFN_DIM, 0)] = ([0, 0, 1], np.ones(3))
        with pytest.raises(ContractError):
            M.count_params(enc, mask)


def _full_mask_dict(enc):
    from prunekit.compactor import full_mask

    return full_mask(enc)


class TestExpectedParamCount:
    def test_matches_exact_count_at_polarized_gates(self):
        from prunekit.compactor import derive_mask

        enc = micro_encoder(seed=2)
        rng = substream(8, "alphas")
        for g in enc.gate_groups:
            g.log_alpha.data = np.where(rng.random(g.num_units) < 0.4, -40.0, 40.0)
        expected = float(M.expected_param_count(enc, G.GateConfig()).data)
        _, _, exact = M.count_params(enc, derive_mask(enc))
        assert expected == pytest.approx(exact, abs=1e-5)

    def test_differentiable_wrt_all_gate_parameters(self):
        enc = micro_encoder()
        backward(M.expected_param_count(enc, G.GateConfig()))
        for g in enc.gate_groups:
            assert g.log_alpha.grad is not None
            assert np.all(g.log_alpha.grad > 0.0)


def test_from_tensors_round_trip():
    enc = micro_encoder(seed=4)
    rebuilt = M.from_tensors(M.arch_metadata(enc),
                             {k: v.data for k, v in M.named_parameters(enc).items()})
    with no_grad():
        _, a = M.forward(enc, signal())
        _, b = M.forward(rebuilt, signal())
    assert np.array_equal(a.data, b.data)


def test_astype_float32_forward_close():
    enc = micro_encoder(seed=6)
    enc32 = M.astype(enc, np.float32)
    with no_grad():
        _, a = M.forward(enc, signal())
        _, b = M.forward(enc32, Tensor(signal().data.astype(np.float32)))
    assert b.data.dtype == np.float32
    assert np.allclose(a.data, b.data, atol=1e-4)
