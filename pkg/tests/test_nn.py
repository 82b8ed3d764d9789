import numpy as np
import pytest

from sebre import nn


def t(data, requires_grad=False):
    return nn.Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


class TestConv2d:
    def test_identity_1x1(self):
        x = t(np.random.default_rng(0).normal(size=(2, 5, 5)))
        w = t(np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1))
        b = t(np.zeros(2))
        out = nn.conv2d(x, w, b)
        np.testing.assert_allclose(out.data, x.data)

    def test_all_ones_kernel_constant_input(self):
        c = 2.5
        x = t(np.full((1, 6, 6), c))
        w = t(np.ones((1, 1, 3, 3)))
        b = t(np.zeros(1))
        out = nn.conv2d(x, w, b, padding=1)
        assert out.shape == (1, 6, 6)
        np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 9 * c, rtol=1e-6)

    def test_stride_and_shape(self):
        x = t(np.zeros((3, 9, 9)))
        w = t(np.zeros((4, 3, 3, 3)))
        b = t(np.zeros(4))
        assert nn.conv2d(x, w, b, stride=2, padding=1).shape == (4, 5, 5)

    def test_batched_matches_looped(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 2, 6, 6)).astype(np.float32)
        w = t(rng.normal(size=(4, 2, 3, 3)))
        b = t(rng.normal(size=4))
        batched = nn.conv2d(t(x), w, b, padding=1).data
        for i in range(3):
            single = nn.conv2d(t(x[i]), w, b, padding=1).data
            np.testing.assert_array_equal(batched[i], single)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(nn.NnError):
            nn.conv2d(t(np.zeros((3, 5, 5))), t(np.zeros((4, 2, 3, 3))), t(np.zeros(4)))

    def test_gradient_finite_difference_32bit(self):
        # linear op, so the 32-bit difference quotient is clean at eps=1e-2
        rng = np.random.default_rng(2)
        x = t(rng.normal(size=(2, 5, 5)), requires_grad=True)
        w = t(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = t(rng.normal(size=3), requires_grad=True)
        out = nn.total(nn.conv2d(x, w, b, padding=1))
        out.backward()
        eps = 1e-2
        flat = x.data.reshape(-1)
        for i in [0, 7, 24, 49]:
            orig = flat[i]
            flat[i] = orig + eps
            hi = nn.total(nn.conv2d(x, w, b, padding=1)).item()
            flat[i] = orig - eps
            lo = nn.total(nn.conv2d(x, w, b, padding=1)).item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            analytic = x.grad.reshape(-1)[i]
            assert abs(analytic - numeric) / max(abs(numeric), 1.0) < 1e-3

    def test_gradient_64bit(self):
        rng = np.random.default_rng(3)
        x = t(rng.normal(size=(2, 5, 5)))
        w = t(rng.normal(size=(3, 2, 3, 3)))
        b = t(rng.normal(size=3))
        err = nn.grad_check(
            lambda x_, w_, b_: nn.total(nn.conv2d(x_, w_, b_, stride=2, padding=1)),
            [x, w, b],
        )
        assert err < 1e-3


class TestResample2d:
    def test_constant_both_modes(self):
        x = t(np.full((1, 4, 4), 3.0))
        np.testing.assert_allclose(nn.resample2d(x, "max_pool_2x2").data, 3.0)
        np.testing.assert_allclose(nn.resample2d(x, "nearest_upsample_2x").data, 3.0)

    def test_pool_window_maximum_and_grad_routing(self):
        x = t([[[1.0, 2.0], [3.0, 4.0]]], requires_grad=True)
        out = nn.resample2d(x, "max_pool_2x2")
        np.testing.assert_allclose(out.data, [[[4.0]]])
        nn.total(out).backward()
        np.testing.assert_array_equal(x.grad, [[[0, 0], [0, 1]]])

    def test_upsample_of_pool_constant_identity(self):
        x = t(np.full((2, 4, 6), 1.5))
        back = nn.resample2d(nn.resample2d(x, "max_pool_2x2"), "nearest_upsample_2x")
        np.testing.assert_array_equal(back.data, x.data)

    def test_odd_extent_rejected(self):
        with pytest.raises(nn.NnError):
            nn.resample2d(t(np.zeros((1, 3, 4))), "max_pool_2x2")

    def test_upsample_shape_and_values(self):
        x = t([[[1.0, 2.0], [3.0, 4.0]]])
        out = nn.resample2d(x, "nearest_upsample_2x")
        np.testing.assert_array_equal(
            out.data[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        )

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = t(rng.normal(size=(2, 4, 4)))
        for mode in ["max_pool_2x2", "nearest_upsample_2x"]:
            err = nn.grad_check(lambda x_: nn.total(nn.resample2d(x_, mode)), [x])
            assert err < 1e-3, mode


class TestDense:
    def test_identity(self):
        x = t(np.random.default_rng(5).normal(size=(3, 4)))
        out = nn.dense(x, t(np.eye(4)), t(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data)

    def test_all_ones_weight(self):
        out = nn.dense(t([[1.0, 2.0, 3.0]]), t(np.ones((3, 2))), t(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[6.0, 6.0]])

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x, w, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(4, 2))), t(rng.normal(size=2))
        err = nn.grad_check(lambda *a: nn.total(nn.dense(*a)), [x, w, b])
        assert err < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(nn.NnError):
            nn.dense(t(np.zeros((2, 3))), t(np.zeros((4, 2))), t(np.zeros(2)))


class TestActivation:
    def test_relu(self):
        out = nn.activation(t([-1.0, 2.0]), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert nn.activation(t([0.0]), "sigmoid").data[0] == pytest.approx(0.5)

    def test_softmax_uniform_row(self):
        out = nn.activation(t(np.zeros((1, 9))), "softmax_rows")
        np.testing.assert_allclose(out.data, 1.0 / 9.0, rtol=1e-6)

    def test_softmax_stability_large_magnitude(self):
        rng = np.random.default_rng(7)
        x = t(rng.uniform(-1e4, 1e4, size=(20, 9)))
        out = nn.activation(x, "softmax_rows")
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        # keep relu inputs away from the kink
        x = t(np.sign(rng.normal(size=(3, 5))) * rng.uniform(0.2, 1.0, (3, 5)))
        for mode in ["relu", "sigmoid", "softmax_rows"]:
            err = nn.grad_check(
                lambda x_: nn.total(nn.square(nn.activation(x_, mode))), [x]
            )
            assert err < 1e-3, mode


class TestLosses:
    def test_softmax_ce_perfect_prediction(self):
        logits = t([[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]])
        loss = nn.softmax_cross_entropy(logits, [0, 1], reduction="sum")
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_softmax_ce_uniform(self):
        loss = nn.softmax_cross_entropy(t(np.zeros((4, 9))), [0, 1, 2, 3])
        assert loss.item() == pytest.approx(np.log(9), rel=1e-5)

    def test_bce_at_half(self):
        loss = nn.sigmoid_cross_entropy(t(np.zeros((2, 3))), np.ones((2, 3)) * 0.5)
        assert loss.item() == pytest.approx(np.log(2), rel=1e-5)

    def test_smooth_l1_closed_form(self):
        # |d| < 1 branch: 0.5 * 0.5^2 = 0.125; |d| >= 1 branch: 2 - 0.5
        loss = nn.smooth_l1(t([0.5, 2.0]), np.zeros(2), reduction="sum")
        assert loss.item() == pytest.approx(0.125 + 1.5, rel=1e-5)

    def test_loss_weights_mask_contributions(self):
        pred = t([1.0, 1.0])
        loss = nn.smooth_l1(pred, np.zeros(2), reduction="sum", weight=[1.0, 0.0])
        assert loss.item() == pytest.approx(0.5, rel=1e-5)

    def test_loss_gradients(self):
        rng = np.random.default_rng(9)
        logits = t(rng.normal(size=(4, 3)))
        labels = np.array([0, 2, 1, 1])
        err = nn.grad_check(
            lambda l: nn.softmax_cross_entropy(l, labels, reduction="mean"), [logits]
        )
        assert err < 1e-3
        targets = rng.integers(0, 2, size=(3, 4)).astype(np.float64)
        err = nn.grad_check(
            lambda l: nn.sigmoid_cross_entropy(l, targets, reduction="mean"),
            [t(rng.normal(size=(3, 4)))],
        )
        assert err < 1e-3
        # keep |d| away from the smooth-L1 kink at 1
        pred = t(rng.uniform(-0.8, 0.8, size=6))
        err = nn.grad_check(lambda p: nn.smooth_l1(p, np.zeros(6)), [pred])
        assert err < 1e-3


class TestStructural:
    def test_concat_reshape_transpose_gradients(self):
        rng = np.random.default_rng(10)
        a, b = t(rng.normal(size=(2, 3))), t(rng.normal(size=(4, 3)))

        def fn(a_, b_):
            joined = nn.concat([a_, b_], axis=0)
            return nn.total(nn.square(nn.transpose(nn.reshape(joined, (3, 6)), (1, 0))))

        assert nn.grad_check(fn, [a, b]) < 1e-3

    def test_add_and_scale(self):
        a, b = t([1.0, 2.0], requires_grad=True), t([3.0, 4.0], requires_grad=True)
        out = nn.total(nn.scale(nn.add(a, b), 2.0))
        assert out.item() == pytest.approx(20.0)
        out.backward()
        np.testing.assert_allclose(a.grad, 2.0)
        np.testing.assert_allclose(b.grad, 2.0)


class TestSgd:
    def test_vanilla_step(self):
        p = nn.Parameter("w", np.array([1.0, 2.0]))
        p.value.grad = np.array([0.5, 0.5], dtype=np.float32)
        nn.sgd_step([p], learning_rate=0.1, momentum=0.0)
        np.testing.assert_allclose(p.data, [0.95, 1.95])
        assert p.value.grad is None

    def test_zero_lr_updates_buffer_only(self):
        p = nn.Parameter("w", np.array([1.0]))
        p.value.grad = np.array([2.0], dtype=np.float32)
        nn.sgd_step([p], learning_rate=0.0, momentum=0.5)
        np.testing.assert_allclose(p.data, [1.0])
        np.testing.assert_allclose(p.momentum, [2.0])

    def test_momentum_unrolled_two_steps(self):
        lr, g = 0.1, 1.0
        p = nn.Parameter("w", np.array([0.0]))
        for _ in range(2):
            p.value.grad = np.array([g], dtype=np.float32)
            nn.sgd_step([p], learning_rate=lr, momentum=0.9)
        np.testing.assert_allclose(p.data, [-lr * g * (1 + 1.9)], rtol=1e-6)

    def test_missing_gradient_names_parameter(self):
        p = nn.Parameter("heads.classifier.weight", np.zeros(2))
        with pytest.raises(nn.NnError, match="heads.classifier.weight"):
            nn.sgd_step([p], 0.1, 0.9)


class TestGradCheck:
    def test_linear_function(self):
        x = t(np.random.default_rng(11).normal(size=(3, 3)))
        assert nn.grad_check(nn.total, [x]) < 1e-9

    def test_sum_of_squares(self):
        x = t(np.random.default_rng(12).normal(size=5))
        x64 = nn.Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
        out = nn.total(nn.square(x64))
        out.backward()
        np.testing.assert_allclose(x64.grad, 2 * x64.data, atol=1e-6)
        assert nn.grad_check(lambda x_: nn.total(nn.square(x_)), [x]) < 1e-6

    def test_composite_network(self):
        rng = np.random.default_rng(13)
        x = t(rng.normal(size=(2, 6, 6)))
        w1 = t(rng.normal(size=(3, 2, 3, 3)) * 0.5)
        b1 = t(np.full(3, 0.3))
        w2 = t(rng.normal(size=(3 * 3 * 3, 4)) * 0.5)
        b2 = t(rng.normal(size=4))

        def fn(x_, w1_, b1_, w2_, b2_):
            h = nn.relu(nn.conv2d(x_, w1_, b1_, stride=2, padding=1))
            h = nn.reshape(h, (1, -1))
            logits = nn.dense(h, w2_, b2_)
            return nn.softmax_cross_entropy(logits, [2], reduction="sum")

        assert nn.grad_check(fn, [x, w1, b1, w2, b2]) < 1e-3

    def test_non_scalar_rejected(self):
        with pytest.raises(nn.NnError):
            nn.grad_check(lambda x: nn.square(x), [t([1.0, 2.0])])


class TestTapeSemantics:
    def test_forward_determinism(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 8, 8)).astype(np.float32)
        w = t(rng.normal(size=(3, 2, 3, 3)))
        b = t(rng.normal(size=3))
        one = nn.conv2d(t(x), w, b, padding=1).data
        two = nn.conv2d(t(x), w, b, padding=1).data
        assert np.array_equal(one, two)

    def test_gradient_accumulation_additive(self):
        x = t([1.0, -2.0, 3.0], requires_grad=True)
        out = nn.total(nn.square(x))
        out.backward()
        first = x.grad.copy()
        out.backward()
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_no_grad_skips_graph(self):
        x = t([1.0], requires_grad=True)
        with nn.no_grad():
            out = nn.square(x)
        assert out._backward is None and not out.requires_grad

    def test_diamond_graph_gradient(self):
        # y = x + x shares one parent twice; dy/dx = 2
        x = t([3.0], requires_grad=True)
        nn.total(nn.add(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0])
