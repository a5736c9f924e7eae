import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encbench.errors import DimensionError, InputError, StateError
from encbench.gradcore import (
    BatchNormState, Graph, ParamSet, Tensor, batchnorm2d, conv2d, global_avg_pool, linear,
    mul, pixel_shuffle, relu, sgd_step, softmax_cross_entropy, sum as tsum,
)
from encbench.gradcore.ops import conv2d_reference, conv_output_size, pixel_unshuffle_array

from oracles import cross_entropy_mp, max_grad_error

GRAD_TOL = 1e-3


def t(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float32), **kw)


class TestTensor:
    def test_shape_and_data_length(self):
        x = t(np.zeros((2, 3, 4)))
        assert x.data.size == int(np.prod(x.shape))
        assert x.dtype == np.float32

    def test_float64_shadow_preserved_through_ops(self):
        x = Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64)
        w = Tensor(np.ones((1, 1, 1, 1)), dtype=np.float64)
        assert conv2d(x, w).dtype == np.float64


class TestConv2d:
    def test_identity_kernel(self):
        x = t([[[[1, 2], [3, 4]]]])
        out = conv2d(x, t(np.ones((1, 1, 1, 1))), t([0]), 1, 0)
        np.testing.assert_array_equal(out.data, [[[[1, 2], [3, 4]]]])

    def test_diagonal_kernel_stride_two(self):
        x = t([[[[1, 2], [3, 4]]]])
        out = conv2d(x, t([[[[1, 0], [0, 1]]]]), t([0]), 2, 0)
        np.testing.assert_array_equal(out.data, [[[[5]]]])

    def test_block_stride_shape(self):
        out = conv2d(t(np.zeros((1, 3, 32, 32))), t(np.zeros((64, 3, 4, 4))), t(np.zeros(64)), 4, 0)
        assert out.shape == (1, 64, 8, 8)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))

    @pytest.mark.parametrize("h", [3, 5, 8])
    @pytest.mark.parametrize("k", [1, 2, 3])
    @pytest.mark.parametrize("s", [1, 2, 3])
    @pytest.mark.parametrize("p", [0, 1, 2])
    def test_shape_formula_and_reference(self, h, k, s, p):
        if h + 2 * p < k:
            pytest.skip("kernel larger than padded input")
        rng = np.random.default_rng(h * 100 + k * 10 + s + p)
        x = rng.standard_normal((2, 2, h, h + 1))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                     Tensor(b, dtype=np.float64), s, p)
        assert out.shape == (2, 3, (h + 2 * p - k) // s + 1, (h + 1 + 2 * p - k) // s + 1)
        assert out.shape[2] == conv_output_size(h, k, s, p)
        np.testing.assert_allclose(out.data, conv2d_reference(x, w, b, s, p), rtol=1e-12, atol=1e-12)


class TestPixelShuffle:
    def test_r1_identity(self):
        x = np.random.default_rng(0).random((2, 5, 3, 3))
        np.testing.assert_array_equal(pixel_shuffle(t(x), 1).data, x.astype(np.float32))

    def test_four_channels_to_2x2(self):
        out = pixel_shuffle(t(np.array([1, 2, 3, 4]).reshape(1, 4, 1, 1)), 2)
        np.testing.assert_array_equal(out.data, [[[[1, 2], [3, 4]]]])

    def test_adaptation_upscale_shape(self):
        assert pixel_shuffle(t(np.zeros((1, 48, 8, 8))), 4).shape == (1, 3, 32, 32)

    def test_index_formula(self):
        r, c, h, w = 3, 2, 2, 4
        x = np.arange(c * r * r * h * w, dtype=np.float32).reshape(1, c * r * r, h, w)
        out = pixel_shuffle(t(x), r).data
        for cc in range(c):
            for hh in range(h):
                for ww in range(w):
                    for i in range(r):
                        for j in range(r):
                            assert out[0, cc, r * hh + i, r * ww + j] == x[0, cc * r * r + i * r + j, hh, ww]

    def test_indivisible_channels(self):
        with pytest.raises(DimensionError):
            pixel_shuffle(t(np.zeros((1, 5, 2, 2))), 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31))
    def test_inverse_rearrangement_is_identity(self, r, c, h, seed):
        x = np.random.default_rng(seed).random((2, c * r * r, h, h + 1)).astype(np.float32)
        np.testing.assert_array_equal(pixel_unshuffle_array(pixel_shuffle(t(x), r).data, r), x)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(t([-1, 0, 2])).data, [0, 0, 2])

    def test_subgradient_at_zero(self):
        x = t([-1, 0, 2], requires_grad=True)
        with Graph() as g:
            loss = tsum(relu(x))
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_idempotent(self):
        x = t(np.random.default_rng(1).standard_normal(100))
        np.testing.assert_array_equal(relu(relu(x)).data, relu(x).data)


class TestBatchNorm:
    def test_constant_channel_gives_beta(self):
        x = t(np.full((4, 1, 2, 2), 3.0))
        out = batchnorm2d(x, t([2.0]), t([0.5]), BatchNormState(1), training=True)
        np.testing.assert_allclose(out.data, 0.5)

    def test_two_point_batch(self):
        x = t(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))
        out = batchnorm2d(x, t([1.0]), t([0.0]), BatchNormState(1), training=True)
        np.testing.assert_allclose(out.data.ravel(), np.array([-1, 1]) / np.sqrt(1 + 1e-5), rtol=1e-6)

    def test_eval_matches_train_with_full_momentum(self):
        rng = np.random.default_rng(2)
        x = t(rng.standard_normal((5, 3, 4, 4)) * 2 + 1)
        gamma, beta = t(rng.random(3) + 0.5), t(rng.random(3))
        state = BatchNormState(3, momentum=1.0)
        train_out = batchnorm2d(x, gamma, beta, state, training=True)
        eval_out = batchnorm2d(x, gamma, beta, state, training=False)
        np.testing.assert_allclose(eval_out.data, train_out.data, atol=1e-3)

    def test_eval_before_update_uses_init_stats(self):
        x = t(np.full((1, 2, 1, 1), 4.0))
        out = batchnorm2d(x, t([1, 1]), t([0, 0]), BatchNormState(2), training=False)
        np.testing.assert_allclose(out.data, 4.0 / np.sqrt(1 + 1e-5), rtol=1e-6)


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(3).random((4, 3))
        np.testing.assert_allclose(linear(t(x), t(np.eye(3)), t(np.zeros(3))).data, x, rtol=1e-6)

    def test_hand_sum(self):
        np.testing.assert_allclose(linear(t([[1, 2]]), t([[1, 1]]), t([1])).data, [[4]])

    def test_weight_grad_is_input_t_upstream(self):
        rng = np.random.default_rng(4)
        x, w = rng.standard_normal((5, 3)), rng.standard_normal((2, 3))
        wt = Tensor(w, requires_grad=True, dtype=np.float64)
        up = rng.standard_normal((5, 2))
        with Graph() as g:
            loss = tsum(mul(linear(Tensor(x, dtype=np.float64), wt), Tensor(up, dtype=np.float64)))
        g.backward(loss)
        np.testing.assert_allclose(wt.grad, up.T @ x, rtol=1e-12)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            linear(t(np.zeros((1, 3))), t(np.zeros((2, 4))))


class TestCrossEntropy:
    def test_uniform(self):
        loss = softmax_cross_entropy(t(np.zeros((1, 10))), [3])
        assert loss.item() == pytest.approx(np.log(10), abs=1e-6)

    def test_large_logits_stable(self):
        loss = softmax_cross_entropy(t([[1000.0, 0.0]]), [0])
        assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((4, 10)) * 3
        labels = rng.integers(0, 10, 4)
        got = softmax_cross_entropy(Tensor(logits, dtype=np.float64), labels).item()
        assert got == pytest.approx(cross_entropy_mp(logits, labels), abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            softmax_cross_entropy(t(np.zeros((2, 3))), [0, 3])

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((3, 4))
        labels = np.array([0, 3, 1])
        lt = Tensor(logits, requires_grad=True, dtype=np.float64)
        with Graph() as g:
            loss = softmax_cross_entropy(lt, labels)
        g.backward(loss)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        p[np.arange(3), labels] -= 1
        np.testing.assert_allclose(lt.grad, p / 3, rtol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.integers(0, 2**31))
    def test_shift_invariance(self, c, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((3, 5)).astype(np.float32)
        labels = rng.integers(0, 5, 3)
        a = softmax_cross_entropy(t(logits), labels).item()
        b = softmax_cross_entropy(t(logits + np.float32(c)), labels).item()
        assert abs(a - b) <= 1e-5


class TestBackward:
    def test_sum_grad_ones(self):
        x = t(np.random.default_rng(7).random((2, 3)), requires_grad=True)
        with Graph() as g:
            loss = tsum(x)
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = t([1, 2], requires_grad=True)
        with Graph() as g:
            loss = tsum(mul(x, x))
        g.backward(loss)
        np.testing.assert_allclose(x.grad, [2, 4])

    def test_fan_out_accumulates(self):
        x = t([1.0, -2.0], requires_grad=True)
        with Graph() as g:
            y = relu(x)
            loss = tsum(x + y + x)
        g.backward(loss)
        np.testing.assert_allclose(x.grad, [3, 2])

    def test_reverse_order_of_execution(self):
        x = t([1.0], requires_grad=True)
        with Graph() as g:
            a = mul(x, 2.0)
            b = mul(a, 3.0)
            loss = tsum(b)
        assert [n.output for n in g.nodes] == [a, b, loss]
        g.backward(loss)
        assert x.grad[0] == 6.0

    def test_backward_twice_is_state_error(self):
        x = t([1.0], requires_grad=True)
        with Graph() as g:
            loss = tsum(x)
        g.backward(loss)
        with pytest.raises(StateError):
            g.backward(loss)

    def test_foreign_loss_rejected(self):
        x = t([1.0], requires_grad=True)
        with Graph():
            loss = tsum(x)
        with pytest.raises(StateError):
            Graph().backward(loss)

    def test_no_graph_no_recording(self):
        x = t([1.0], requires_grad=True)
        y = tsum(x)
        assert not y.requires_grad


class TestGradientChecks:
    """Analytic vs central differences on the float64 shadow path."""

    def test_conv2d(self):
        rng = np.random.default_rng(10)
        arrays = [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
        for stride, pad in [(1, 1), (2, 0), (2, 1)]:
            build = lambda x, w, b: tsum(mul(conv2d(x, w, b, stride, pad), conv2d(x, w, b, stride, pad)))
            assert max_grad_error(build, arrays) <= GRAD_TOL

    def test_linear(self):
        rng = np.random.default_rng(11)
        arrays = [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)]
        up = rng.standard_normal((3, 2))
        build = lambda x, w, b: tsum(mul(linear(x, w, b), Tensor(up, dtype=np.float64)))
        assert max_grad_error(build, arrays) <= GRAD_TOL

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, training):
        rng = np.random.default_rng(12)
        arrays = [rng.standard_normal((3, 2, 2, 2)), rng.random(2) + 0.5, rng.standard_normal(2)]
        up = rng.standard_normal((3, 2, 2, 2))

        def build(x, g, b):
            state = BatchNormState(2)
            state.running_mean = np.array([0.1, -0.2], dtype=np.float32)
            state.running_var = np.array([1.5, 0.7], dtype=np.float32)
            return tsum(mul(batchnorm2d(x, g, b, state, training), Tensor(up, dtype=np.float64)))

        assert max_grad_error(build, arrays) <= GRAD_TOL

    def test_pixel_shuffle(self):
        rng = np.random.default_rng(13)
        up = rng.standard_normal((1, 2, 4, 4))
        build = lambda x: tsum(mul(pixel_shuffle(x, 2), Tensor(up, dtype=np.float64)))
        assert max_grad_error(build, [rng.standard_normal((1, 8, 2, 2))]) <= GRAD_TOL

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(14)
        labels = rng.integers(0, 5, 4)
        build = lambda z: softmax_cross_entropy(z, labels)
        assert max_grad_error(build, [rng.standard_normal((4, 5))]) <= GRAD_TOL

    def test_global_avg_pool(self):
        rng = np.random.default_rng(15)
        up = rng.standard_normal((2, 3))
        build = lambda x: tsum(mul(global_avg_pool(x), Tensor(up, dtype=np.float64)))
        assert max_grad_error(build, [rng.standard_normal((2, 3, 2, 2))]) <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(5))
    def test_two_layer_conv_net(self, seed):
        rng = np.random.default_rng(100 + seed)
        labels = rng.integers(0, 3, 2)
        while True:
            arrays = [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3)) * 0.5,
                      rng.standard_normal(4) * 0.1, rng.standard_normal((3, 4, 3, 3)) * 0.5,
                      rng.standard_normal(3) * 0.1]
            pre = conv2d(*(Tensor(a, dtype=np.float64) for a in arrays[:3]), 1, 1).data
            # central differences are only valid away from the ReLU kink
            if np.abs(pre).min() > 0.05:
                break

        def build(x, w1, b1, w2, b2):
            h = relu(conv2d(x, w1, b1, 1, 1))
            z = global_avg_pool(conv2d(h, w2, b2, 2, 0))
            return softmax_cross_entropy(z, labels)

        assert max_grad_error(build, arrays) <= GRAD_TOL

    def test_random_trials_sweep(self):
        """100 random small conv/linear/bn problems."""
        rng = np.random.default_rng(16)
        for trial in range(100):
            kind = trial % 3
            if kind == 0:
                c, k = int(rng.integers(1, 3)), int(rng.integers(1, 4))
                arrays = [rng.standard_normal((1, c, 4, 4)), rng.standard_normal((2, c, k, k)), rng.standard_normal(2)]
                s = int(rng.integers(1, 3))
                build = lambda x, w, b, s=s: tsum(mul(conv2d(x, w, b, s, 1), conv2d(x, w, b, s, 1)))
            elif kind == 1:
                arrays = [rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)]
                build = lambda x, w, b: tsum(mul(linear(x, w, b), linear(x, w, b)))
            else:
                arrays = [rng.standard_normal((2, 2, 2, 2)), rng.random(2) + 0.5, rng.standard_normal(2)]
                up = rng.standard_normal((2, 2, 2, 2))
                build = lambda x, g, b, up=up: tsum(mul(batchnorm2d(x, g, b, BatchNormState(2), True),
                                                        Tensor(up, dtype=np.float64)))
            assert max_grad_error(build, arrays) <= GRAD_TOL, f"trial {trial}"


class TestSGD:
    def _params(self, value, grad):
        ps = ParamSet()
        p = ps.add("w", t([value]))
        p.grad = np.array([grad], dtype=np.float32)
        return ps

    def test_zero_grad_no_change(self):
        ps = self._params(1.5, 0.0)
        sgd_step(ps, 0.1, 0.9, 0.0)
        assert ps["w"].data[0] == np.float32(1.5)

    def test_single_step(self):
        ps = self._params(1.0, 0.5)
        sgd_step(ps, 0.1, 0.0, 0.0)
        assert ps["w"].data[0] == pytest.approx(0.95)

    def test_momentum_two_steps(self):
        ps = self._params(0.0, 1.0)
        sgd_step(ps, 0.1, 0.9, 0.0)
        assert ps["w"].data[0] == pytest.approx(-0.1)
        ps["w"].grad = np.array([1.0], dtype=np.float32)
        sgd_step(ps, 0.1, 0.9, 0.0)
        assert ps["w"].data[0] == pytest.approx(-0.29)
        assert ps.step == 2

    def test_grads_cleared_and_missing_is_error(self):
        ps = self._params(1.0, 1.0)
        sgd_step(ps, 0.1)
        assert ps["w"].grad is None
        with pytest.raises(StateError):
            sgd_step(ps, 0.1)

    def test_weight_decay(self):
        ps = self._params(2.0, 0.0)
        sgd_step(ps, 0.5, 0.0, 0.1)
        assert ps["w"].data[0] == pytest.approx(2.0 - 0.5 * 0.2)

    def test_duplicate_names_rejected(self):
        ps = ParamSet()
        ps.add("a", t([1.0]))
        with pytest.raises(InputError):
            ps.add("a", t([2.0]))

    def test_insertion_order(self):
        ps = ParamSet()
        for name in ["z", "a", "m"]:
            ps.add(name, t([0.0]))
        assert list(ps) == ["z", "a", "m"]
