"""FilterLayer gating, variants, sparsity terms, and their gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import imo.tensor as T
from imo.errors import ConfigError, ShapeError
from imo.masking import FilterLayer, R_INIT_STD, S_INIT

from _oracles import fd_gradient


def make_layer(r, s, variant="long_tailed"):
    layer = FilterLayer(len(np.atleast_1d(r)), variant=variant)
    layer.r.data = np.array(r, dtype=np.float64)
    layer.s.data = np.array(s, dtype=np.float64)
    return layer


class TestGate:
    def test_gate_and_filtering_vector(self):
        layer = make_layer([0.5, -0.2, 0.1], [0.3, 0.3, 0.3])
        np.testing.assert_array_equal(layer.binary_mask_values(), [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(layer.filtering_values(), [0.5, 0.0, 0.0])

    def test_zero_margin_gate_is_open(self):
        layer = make_layer([0.0], [0.0])
        np.testing.assert_array_equal(layer.binary_mask_values(), [1.0])

    def test_reconstruction_m_equals_r_times_q(self):
        rng = np.random.default_rng(3)
        layer = make_layer(rng.normal(size=16), rng.uniform(0, 0.2, size=16))
        np.testing.assert_array_equal(
            layer.filtering_values(), layer.r.data * layer.binary_mask_values())

    def test_apply_multiplies_states(self):
        layer = make_layer([0.5, -0.2, 0.1], [0.3, 0.3, 0.3])
        states = T.Tensor(np.ones((2, 4, 3)))
        out = layer.apply(states)
        np.testing.assert_allclose(out.data[..., 0], 0.5)
        np.testing.assert_allclose(out.data[..., 1:], 0.0)

    def test_apply_rejects_wrong_width(self):
        layer = make_layer([0.1, 0.2], [0.0, 0.0])
        with pytest.raises(ShapeError):
            layer.apply(T.Tensor(np.ones((2, 3))))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            FilterLayer(4, variant="soft")

    def test_init_distribution(self):
        rng = np.random.default_rng(0)
        layer = FilterLayer(4096, rng=rng)
        assert abs(layer.r.data.std() - R_INIT_STD) < 0.1 * R_INIT_STD
        np.testing.assert_array_equal(layer.s.data, np.full(4096, S_INIT))


class TestVariants:
    def test_str_soft_threshold_value(self):
        # sigma(s) = 0.4 at s = logit(0.4); |r| - 0.4 = 0.6 survives with sign.
        s = np.log(0.4 / 0.6)
        layer = make_layer([1.0], [s], variant="str")
        np.testing.assert_allclose(layer.filtering_values(), [0.6], atol=1e-12)
        layer_neg = make_layer([-1.0], [s], variant="str")
        np.testing.assert_allclose(layer_neg.filtering_values(), [-0.6], atol=1e-12)

    def test_str_produces_exact_zeros(self):
        layer = make_layer([0.3, -0.2, 0.9], [0.0, 0.0, 0.0], variant="str")  # sigma(0)=0.5
        np.testing.assert_array_equal(layer.filtering_values(), [0.0, 0.0, 0.4])
        assert layer.sparsity_fraction() == pytest.approx(2.0 / 3.0)

    def test_scalar_variant_broadcasts_one_threshold(self):
        layer = FilterLayer(3, variant="scalar")
        layer.r.data = np.array([0.2, 0.01, -0.3])
        np.testing.assert_array_equal(layer.binary_mask_values(), [1.0, 0.0, 1.0])
        assert layer.s.data.shape == (1,)

    def test_ste_gate_matches_long_tailed_forward(self):
        r = np.array([0.5, -0.2, 0.1])
        s = np.array([0.3, 0.3, 0.3])
        a = make_layer(r, s, variant="long_tailed")
        b = make_layer(r, s, variant="ste")
        np.testing.assert_array_equal(a.binary_mask_values(), b.binary_mask_values())

    def test_ste_backward_is_flat_window(self):
        layer = make_layer([0.35], [0.05], variant="ste")  # t = 0.3
        with T.Tape() as tape:
            loss = T.reduce_sum(layer.binary_mask())
        tape.backward(loss)
        # STE passes gradient 1 through the gate; d|r|/dr = sign(r).
        np.testing.assert_allclose(layer.r.grad, [1.0])
        np.testing.assert_allclose(layer.s.grad, [-1.0])


class TestSparsity:
    def test_loss_values(self):
        assert make_layer([1.0, 1.0], [0.0, 0.0]).sparsity_loss().item() == pytest.approx(2.0)
        assert make_layer([1.0], [np.log(2.0)]).sparsity_loss().item() == pytest.approx(0.5)

    def test_loss_gradient_at_zero(self):
        layer = make_layer([1.0], [0.0])
        with T.Tape() as tape:
            loss = layer.sparsity_loss()
        tape.backward(loss)
        np.testing.assert_allclose(layer.s.grad, [-1.0], atol=1e-12)

    def test_scalar_loss_counts_every_feature(self):
        layer = FilterLayer(8, variant="scalar")
        layer.s.data = np.array([0.05])
        assert layer.sparsity_loss().item() == pytest.approx(8.0 * np.exp(-0.05))
        with T.Tape() as tape:
            loss = layer.sparsity_loss()
        tape.backward(loss)
        np.testing.assert_allclose(layer.s.grad, [-8.0 * np.exp(-0.05)], atol=1e-12)

    def test_fraction_counts_zero_gates(self):
        layer = make_layer([0.5, -0.2, 0.1, 0.0], [0.3, 0.3, 0.3, 0.3])
        assert layer.sparsity_fraction() == pytest.approx(3.0 / 4.0)


class TestGradients:
    def test_surrogate_flow_to_r_and_s(self):
        # t = |r| - s = 0.2 sits on the 2-4|t| ramp: factor 1.2.
        layer = make_layer([0.5], [0.3])
        with T.Tape() as tape:
            loss = T.reduce_sum(layer.filtering_vector())
        tape.backward(loss)
        # dm/dr = q + r * f(t) * sign(r) = 1 + 0.5 * 1.2 = 1.6
        np.testing.assert_allclose(layer.r.grad, [1.6], atol=1e-12)
        # dm/ds = r * f(t) * (-1) = -0.6
        np.testing.assert_allclose(layer.s.grad, [-0.6], atol=1e-12)

    def test_closed_gate_still_learns(self):
        # Mostly-closed init: gradients must not vanish.
        layer = make_layer([0.01], [0.05])
        with T.Tape() as tape:
            loss = T.reduce_sum(layer.filtering_vector())
        tape.backward(loss)
        assert layer.r.grad[0] != 0.0
        assert layer.s.grad[0] != 0.0

    def test_str_gradients_match_fd(self):
        r0 = np.array([0.9, -0.7, 0.6])
        s0 = np.array([0.1, -0.2, 0.3])

        def loss_of(arrays):
            layer = make_layer(arrays["r"], arrays["s"], variant="str")
            sigma = 1.0 / (1.0 + np.exp(-np.asarray(arrays["s"])))
            assert np.all(np.abs(np.abs(arrays["r"]) - sigma) > 1e-3)  # away from the kink
            return float((layer.filtering_values() * [1.0, 2.0, 3.0]).sum())

        want = fd_gradient(loss_of, {"r": r0.copy(), "s": s0.copy()})
        layer = make_layer(r0, s0, variant="str")
        with T.Tape() as tape:
            loss = T.reduce_sum(T.mul(layer.filtering_vector(), T.Tensor([1.0, 2.0, 3.0])))
        tape.backward(loss)
        np.testing.assert_allclose(layer.r.grad, want["r"], rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(layer.s.grad, want["s"], rtol=1e-4, atol=1e-7)

    def test_sparsity_gradient_matches_fd(self):
        s0 = np.array([0.0, 0.5, -0.3])

        def loss_of(arrays):
            return float(np.exp(-np.asarray(arrays["s"])).sum())

        want = fd_gradient(loss_of, {"s": s0.copy()})
        layer = make_layer([1.0, 1.0, 1.0], s0)
        with T.Tape() as tape:
            loss = layer.sparsity_loss()
        tape.backward(loss)
        np.testing.assert_allclose(layer.s.grad, want["s"], rtol=1e-4, atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=4, max_size=4),
    st.lists(st.floats(0, 0.5), min_size=4, max_size=4),
    st.floats(0.01, 0.5),
)
def test_raising_thresholds_never_opens_gates(r, s, delta):
    layer_lo = make_layer(r, s)
    layer_hi = make_layer(r, np.array(s) + delta)
    assert np.all(layer_hi.binary_mask_values() <= layer_lo.binary_mask_values())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=8))
def test_fraction_between_zero_and_one(r):
    layer = make_layer(r, np.full(len(r), 0.3))
    assert 0.0 <= layer.sparsity_fraction() <= 1.0


def test_state_round_trip():
    rng = np.random.default_rng(11)
    layer = FilterLayer(6, variant="scalar", rng=rng, layer_index=3)
    layer.freeze()
    clone = FilterLayer.from_state(layer.state())
    np.testing.assert_array_equal(clone.r.data, layer.r.data)
    np.testing.assert_array_equal(clone.s.data, layer.s.data)
    assert clone.frozen and clone.variant == "scalar" and clone.layer_index == 3


def test_snapshot_has_all_fields():
    layer = make_layer([0.5, -0.2], [0.3, 0.3])
    snap = layer.snapshot()
    assert set(snap) == {"layer_index", "variant", "frozen", "r", "s", "q", "m"}
    np.testing.assert_array_equal(snap["q"], [1.0, 0.0])
