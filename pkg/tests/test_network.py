import numpy as np
import pytest

from ttcloc import network
from ttcloc.errors import ValidationError
from ttcloc.gradcheck import (
    check_gate_gradient,
    check_network_backward,
    check_network_backward_with_dropout,
    flatten_params,
)
from ttcloc.network import (
    NetworkParams,
    ScoreMap,
    apply_gate,
    backward,
    forward,
    init_params,
    load_params,
    save_params,
    zeros_like_params,
)


def tiny_params(seed=0, d=2, h=4, c=2):
    return init_params(np.random.default_rng(seed), d, h, c)


class TestForward:
    def test_zero_params_give_zero_outputs(self):
        params = zeros_like_params(tiny_params())
        smap, _ = forward(params, np.random.default_rng(1).normal(size=(5, 2)))
        assert not smap.scores.any()
        assert not smap.thresholds.any()

    def test_single_snippet_sees_zero_padding(self):
        params = tiny_params()
        smap, _ = forward(params, np.random.default_rng(2).normal(size=(1, 2)))
        assert smap.scores.shape == (1, 2)
        assert smap.thresholds.shape == (1,)
        assert np.all(np.isfinite(smap.scores))

    def test_deterministic(self):
        params = tiny_params()
        x = np.random.default_rng(3).normal(size=(6, 2))
        a, _ = forward(params, x)
        b, _ = forward(params, x)
        assert a.scores.tobytes() == b.scores.tobytes()
        assert a.thresholds.tobytes() == b.thresholds.tobytes()

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValidationError):
            forward(tiny_params(), np.zeros((4, 3)))

    def test_conv_identity_kernel_doubles_constant_rows(self):
        # Kernel summing the three taps as identity maps a constant-in-time
        # h1 to 2*h1 at interior snippets; the zero padding removes exactly
        # one tap's worth at each boundary snippet.
        h = 3
        eye = np.eye(h)
        kernel = np.stack([eye, eye, eye])
        h1 = np.tile(np.array([1.0, 2.0, 3.0]), (5, 1))
        out = network._conv3(h1, kernel, np.zeros(h))
        np.testing.assert_allclose(out[1:-1], 3.0 * h1[1:-1])
        np.testing.assert_allclose(out[0], 2.0 * h1[0])
        np.testing.assert_allclose(out[-1], 2.0 * h1[-1])

    def test_dropout_mask_scales_surviving_units(self):
        params = tiny_params()
        x = np.random.default_rng(4).normal(size=(3, 2))
        t, h = 3, params.hidden_dim
        full_mask = np.ones((t, h))
        smap_scaled, _ = forward(params, x, dropout_mask=full_mask, drop_rate=0.5)
        smap_plain, _ = forward(params, x)
        # all-ones mask with p=0.5 doubles activations entering the head
        np.testing.assert_allclose(
            smap_scaled.scores - params.b2[:2], 2.0 * (smap_plain.scores - params.b2[:2]), atol=1e-12
        )


class TestBackward:
    def test_zero_upstream_gives_zero_bundle(self):
        params = tiny_params()
        _, cache = forward(params, np.random.default_rng(5).normal(size=(4, 2)))
        grads = backward(cache, np.zeros((4, 2)), np.zeros(4))
        assert not flatten_params(grads).any()

    def test_matches_finite_differences(self):
        assert check_network_backward(seed=0) < 1e-7
        assert check_network_backward(seed=1, t=5, d=3, h=4, c=3) < 1e-7

    def test_matches_finite_differences_with_dropout(self):
        assert check_network_backward_with_dropout(seed=2) < 1e-7

    def test_zero_conv_kernel_reduces_to_fc_backward(self):
        params = tiny_params()
        params.conv_kernel[:] = 0.0
        params.conv_bias[:] = 0.0
        x = np.random.default_rng(6).normal(size=(4, 2))
        d_s = np.random.default_rng(7).normal(size=(4, 2))
        d_b = np.random.default_rng(8).normal(size=(4,))
        _, cache = forward(params, x)
        grads = backward(cache, d_s, d_b)

        # reference: plain two-layer net relu(x@w1+b1) @ w2 + b2 (the
        # residual relu(relu(z1)) is idempotent so h2 == h1 here)
        z1 = x @ params.w1 + params.b1
        h1 = np.maximum(z1, 0)
        d_out = np.concatenate([d_s, d_b[:, None]], axis=1)
        d_h1 = (d_out @ params.w2.T) * (h1 > 0)
        d_z1 = d_h1 * (z1 > 0)
        np.testing.assert_allclose(grads.w1, x.T @ d_z1, atol=1e-12)
        np.testing.assert_allclose(grads.w2, h1.T @ d_out, atol=1e-12)


class TestGating:
    def test_gate_is_half_at_equal_scores(self):
        smap = ScoreMap(scores=np.full((3, 2), 1.7), thresholds=np.full(3, 1.7))
        for kind in ("sigmoid", "softsign"):
            np.testing.assert_allclose(apply_gate(smap, kind).values, 0.5)

    def test_sigmoid_at_unit_margin(self):
        # 1 / (1 + e^-1), evaluated to full double precision
        smap = ScoreMap(scores=np.array([[1.0]]), thresholds=np.array([0.0]))
        np.testing.assert_allclose(apply_gate(smap, "sigmoid").values, 0.7310585786300049, rtol=0, atol=1e-15)

    def test_binarize_forward_and_surrogate(self):
        x = np.array([-0.3, 0.0, 0.2])
        vals = network.gate_values(x, "binarize")
        np.testing.assert_array_equal(vals, [0.0, 0.0, 1.0])
        np.testing.assert_array_equal(network.gate_input_grad(x, vals, "binarize"), 1.0)

    def test_smooth_gates_match_finite_differences(self):
        assert check_gate_gradient("sigmoid") < 1e-9
        assert check_gate_gradient("softsign") < 1e-9

    def test_gate_ranges(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-30, 30, size=2000)
        for kind in ("sigmoid", "softsign"):
            g = network.gate_values(x, kind)
            assert np.all(g > 0) and np.all(g < 1)
        g = network.gate_values(x, "binarize")
        assert set(np.unique(g)) <= {0.0, 1.0}

    def test_shift_equivariance(self):
        rng = np.random.default_rng(10)
        s = rng.normal(size=(6, 3))
        b = rng.normal(size=6)
        for kind in ("sigmoid", "softsign", "binarize"):
            base = apply_gate(ScoreMap(s, b), kind).values
            shifted = apply_gate(ScoreMap(s + 2.5, b + 2.5), kind).values
            np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            network.gate_values(np.zeros(2), "tanh")


class TestInit:
    def test_deterministic_given_seed(self):
        a = tiny_params(seed=42)
        b = tiny_params(seed=42)
        assert flatten_params(a).tobytes() == flatten_params(b).tobytes()

    def test_biases_zero(self):
        p = tiny_params()
        assert not p.b1.any() and not p.b2.any() and not p.conv_bias.any()

    def test_w1_spread_matches_uniform_moment(self):
        # std of U(-a, a) is a / sqrt(3)
        p = init_params(np.random.default_rng(0), 64, 2048, 4)
        a = np.sqrt(6.0 / (64 + 2048))
        assert abs(p.w1.std() - a / np.sqrt(3)) < 0.05 * (a / np.sqrt(3))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = tiny_params(seed=11)
        path = str(tmp_path / "params.bin")
        save_params(params, path)
        loaded = load_params(path)
        for name, arr in params.as_dict().items():
            np.testing.assert_array_equal(arr, getattr(loaded, name))

    def test_byte_identical_across_saves(self, tmp_path):
        params = tiny_params(seed=12)
        p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        save_params(params, p1)
        save_params(params, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "junk.bin")
        with open(path, "wb") as fh:
            fh.write(b"NOPElol")
        with pytest.raises(ValidationError):
            load_params(path)
