import numpy as np
import pytest

from colorizer.engine import (
    AdamState,
    BatchNormState,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    bilinear_upsample,
    conv2d_backward,
    conv2d_forward,
    he_normal,
    l2_loss,
    relu_backward,
    relu_forward,
    upsample_nearest_backward,
    upsample_nearest_forward,
    weighted_softmax_xent,
)

H_FD = 1e-4


def numeric_grad(f, x, h=H_FD):
    """Central finite differences of scalar f() w.r.t. array x, in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    scale = max(1.0, np.abs(analytic).max(), np.abs(numeric).max())
    return np.abs(analytic - numeric).max() / scale


def conv_reference(x, w, b, stride, dilation, pad):
    """Direct six-nested-loop convolution."""
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wid + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (xp[ni, ci,
                                           i * stride + ki * dilation,
                                           j * stride + kj * dilation]
                                        * w[co, ci, ki, kj])
                    y[ni, co, i, j] = acc
    return y


class TestConvForward:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1, 3, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y, _ = conv2d_forward(x, w, np.zeros(1))
        np.testing.assert_allclose(y, x, atol=1e-12)

    def test_stride_2_halves_224(self):
        x = np.zeros((1, 2, 224, 224), dtype=np.float32)
        w = np.zeros((3, 2, 3, 3), dtype=np.float32)
        y, _ = conv2d_forward(x, w, np.zeros(3, dtype=np.float32), stride=2)
        assert y.shape == (1, 3, 112, 112)

    @pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (2, 2)])
    def test_matches_loop_reference(self, stride, dilation):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        pad = dilation
        y, _ = conv2d_forward(x, w, b, stride=stride, dilation=dilation, pad=pad)
        np.testing.assert_allclose(
            y, conv_reference(x, w, b, stride, dilation, pad), atol=1e-5)

    def test_dilation_equals_zero_inflated_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 9, 9))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        y_dil, _ = conv2d_forward(x, w, b, dilation=2, pad=2)
        w_inflated = np.zeros((3, 2, 5, 5))
        w_inflated[:, :, ::2, ::2] = w
        y_inf, _ = conv2d_forward(x, w_inflated, b, dilation=1, pad=2)
        np.testing.assert_allclose(y_dil, y_inf, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)),
                           np.zeros(1))


class TestConvBackward:
    @pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2)])
    def test_finite_differences(self, stride, dilation):
        rng = np.random.default_rng(3)
        worst = {"x": 0.0, "w": 0.0, "b": 0.0}
        for _ in range(7):
            x = rng.standard_normal((2, 3, 5, 5))
            w = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            pad = dilation
            y, cache = conv2d_forward(x, w, b, stride=stride, dilation=dilation, pad=pad)
            r = rng.standard_normal(y.shape)
            gx, gw, gb = conv2d_backward(r, cache)

            def loss():
                out, _ = conv2d_forward(x, w, b, stride=stride,
                                        dilation=dilation, pad=pad)
                return float((out * r).sum())

            worst["x"] = max(worst["x"], max_rel_err(gx, numeric_grad(loss, x)))
            worst["w"] = max(worst["w"], max_rel_err(gw, numeric_grad(loss, w)))
            worst["b"] = max(worst["b"], max_rel_err(gb, numeric_grad(loss, b)))
        assert max(worst.values()) < 1e-4, worst

    def test_zero_grad_out_gives_zero_grads(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3))
        y, cache = conv2d_forward(x, w, np.zeros(2))
        gx, gw, gb = conv2d_backward(np.zeros_like(y), cache)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_backward_is_linear(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3))
        y, cache = conv2d_forward(x, w, np.zeros(2))
        g = rng.standard_normal(y.shape)
        gx1, gw1, gb1 = conv2d_backward(g, cache)
        gx2, gw2, gb2 = conv2d_backward(2.5 * g, cache)
        np.testing.assert_allclose(gx2, 2.5 * gx1, atol=1e-12)
        np.testing.assert_allclose(gw2, 2.5 * gw1, atol=1e-12)
        np.testing.assert_allclose(gb2, 2.5 * gb1, atol=1e-12)


class TestBatchNorm:
    def test_constant_input_returns_beta(self):
        x = np.full((3, 2, 4, 4), 7.5)
        gamma = np.array([2.0, 3.0])
        beta = np.array([-1.0, 4.0])
        state = BatchNormState.create(2, dtype=np.float64)
        y, _ = batchnorm_forward(x, gamma, beta, state, training=True)
        np.testing.assert_allclose(y[:, 0], -1.0, atol=1e-5)
        np.testing.assert_allclose(y[:, 1], 4.0, atol=1e-5)

    def test_normalizes_batch_statistics(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 3, 6, 6)) * 5 + 2
        state = BatchNormState.create(3, dtype=np.float64)
        y, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), state, training=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_eval_before_train_rejected(self):
        state = BatchNormState.create(2, dtype=np.float64)
        with pytest.raises(RuntimeError):
            batchnorm_forward(np.zeros((1, 2, 2, 2)), np.ones(2), np.zeros(2),
                              state, training=False)

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(7)
        state = BatchNormState.create(2, dtype=np.float64)
        for _ in range(200):
            batchnorm_forward(rng.standard_normal((8, 2, 4, 4)) * 3 + 1,
                              np.ones(2), np.zeros(2), state, training=True)
        np.testing.assert_allclose(state.running_mean, 1.0, atol=0.2)
        np.testing.assert_allclose(state.running_var, 9.0, atol=1.5)
        x = rng.standard_normal((2, 2, 3, 3))
        y, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), state, training=False)
        want = (x - state.running_mean[None, :, None, None]) / np.sqrt(
            state.running_var[None, :, None, None] + state.eps)
        np.testing.assert_allclose(y, want, atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(10):
            x = rng.standard_normal((2, 3, 4, 4)) * 2
            gamma = rng.uniform(0.5, 2.0, 3)
            beta = rng.standard_normal(3)
            r = rng.standard_normal(x.shape)

            def loss():
                st = BatchNormState.create(3, dtype=np.float64)
                out, _ = batchnorm_forward(x, gamma, beta, st, training=True)
                return float((out * r).sum())

            st = BatchNormState.create(3, dtype=np.float64)
            y, cache = batchnorm_forward(x, gamma, beta, st, training=True)
            gx, ggamma, gbeta = batchnorm_backward(r, cache)
            worst = max(worst, max_rel_err(gx, numeric_grad(loss, x)))
            worst = max(worst, max_rel_err(ggamma, numeric_grad(loss, gamma)))
            worst = max(worst, max_rel_err(gbeta, numeric_grad(loss, beta)))
        assert worst < 1e-4


class TestRelu:
    def test_clamps_negative(self):
        y, _ = relu_forward(np.array([-3.0, -0.5, 0.0, 0.5, 3.0]).reshape(1, 1, 1, 5))
        np.testing.assert_array_equal(y.ravel(), [0, 0, 0, 0.5, 3.0])

    def test_identity_on_nonnegative(self):
        x = np.abs(np.random.default_rng(9).standard_normal((2, 2, 3, 3)))
        y, _ = relu_forward(x)
        np.testing.assert_array_equal(y, x)

    def test_subgradient_zero_at_zero(self):
        x = np.zeros((1, 1, 1, 3))
        _, mask = relu_forward(x)
        g = relu_backward(np.ones_like(x), mask)
        np.testing.assert_array_equal(g, 0.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(10)
        worst = 0.0
        for _ in range(20):
            # keep points away from the kink where the derivative jumps
            x = rng.standard_normal((2, 2, 4, 4))
            x[np.abs(x) < 10 * H_FD] += 0.1
            r = rng.standard_normal(x.shape)
            _, mask = relu_forward(x)
            gx = relu_backward(r, mask)

            def loss():
                out, _ = relu_forward(x)
                return float((out * r).sum())

            worst = max(worst, max_rel_err(gx, numeric_grad(loss, x)))
        assert worst < 1e-4


class TestUpsample:
    def test_doubles_28_to_56(self):
        x = np.zeros((1, 4, 28, 28))
        assert upsample_nearest_forward(x).shape == (1, 4, 56, 56)

    def test_replicates_2x2(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        y = upsample_nearest_forward(x)
        want = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        np.testing.assert_array_equal(y[0, 0], want)

    def test_backward_is_block_sum(self):
        rng = np.random.default_rng(11)
        g = rng.standard_normal((1, 2, 4, 4))
        gx = upsample_nearest_backward(g)
        want = g[0, :, 0::2, 0::2] + g[0, :, 0::2, 1::2] \
            + g[0, :, 1::2, 0::2] + g[0, :, 1::2, 1::2]
        np.testing.assert_allclose(gx[0], want, atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal((2, 2, 3, 3))
            r = rng.standard_normal((2, 2, 6, 6))
            gx = upsample_nearest_backward(r)

            def loss():
                return float((upsample_nearest_forward(x) * r).sum())

            worst = max(worst, max_rel_err(gx, numeric_grad(loss, x)))
        assert worst < 1e-4


class TestBilinear:
    def test_factor_one_is_identity(self):
        x = np.random.default_rng(13).standard_normal((1, 2, 5, 5))
        np.testing.assert_array_equal(bilinear_upsample(x, 5, 5), x)

    def test_constant_stays_constant(self):
        x = np.full((1, 1, 3, 3), 2.5)
        np.testing.assert_allclose(bilinear_upsample(x, 7, 9), 2.5, atol=1e-12)

    def test_2x2_to_4x4_hand_case(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y = bilinear_upsample(x, 4, 4)[0, 0]
        # align-corners=false: src = (dst + .5)/2 - .5 -> fractions 0, .25, .75, 1
        want_row0 = [1.0, 1.25, 1.75, 2.0]
        np.testing.assert_allclose(y[0], want_row0, atol=1e-12)
        np.testing.assert_allclose(y[3], [3.0, 3.25, 3.75, 4.0], atol=1e-12)
        np.testing.assert_allclose(y[:, 0], [1.0, 1.5, 2.5, 3.0], atol=1e-12)
        assert y[1, 1] == pytest.approx(1.0 * .75 * .75 + 2.0 * .75 * .25
                                        + 3.0 * .25 * .75 + 4.0 * .25 * .25)


class TestWeightedSoftmaxXent:
    def test_uniform_logits_onehot_targets(self):
        n, q, h, w = 2, 7, 3, 3
        logits = np.zeros((n, q, h, w))
        rng = np.random.default_rng(14)
        targets = np.zeros_like(logits)
        picks = rng.integers(0, q, size=(n, h, w))
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    targets[ni, picks[ni, i, j], i, j] = 1.0
        loss, _ = weighted_softmax_xent(logits, targets, np.ones((n, h, w)))
        assert loss == pytest.approx(h * w * np.log(q), rel=1e-9)

    def test_zero_weights_zero_loss_and_grad(self):
        rng = np.random.default_rng(15)
        logits = rng.standard_normal((2, 5, 3, 3))
        targets = rng.dirichlet(np.ones(5), size=(2, 3, 3)).transpose(0, 3, 1, 2)
        loss, grad = weighted_softmax_xent(logits, targets, np.zeros((2, 3, 3)))
        assert loss == 0.0
        assert not grad.any()

    def test_loss_nonnegative_softmax_rows_sum(self):
        rng = np.random.default_rng(16)
        logits = rng.standard_normal((2, 6, 4, 4)) * 3
        targets = rng.dirichlet(np.ones(6), size=(2, 4, 4)).transpose(0, 3, 1, 2)
        v = rng.uniform(0, 2, size=(2, 4, 4))
        loss, grad = weighted_softmax_xent(logits, targets, v)
        assert loss >= 0.0
        # grad = v*(softmax - Z)/N, so per-pixel channel sums must vanish
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(17)
        worst = 0.0
        for _ in range(20):
            logits = rng.standard_normal((2, 5, 3, 3))
            targets = rng.dirichlet(np.ones(5), size=(2, 3, 3)).transpose(0, 3, 1, 2)
            v = rng.uniform(0, 2, size=(2, 3, 3))
            _, grad = weighted_softmax_xent(logits, targets, v)

            def loss():
                return weighted_softmax_xent(logits, targets, v)[0]

            worst = max(worst, max_rel_err(grad, numeric_grad(loss, logits)))
        assert worst < 1e-4

    def test_descent_property(self):
        rng = np.random.default_rng(18)
        logits = rng.standard_normal((1, 6, 4, 4))
        targets = rng.dirichlet(np.ones(6), size=(1, 4, 4)).transpose(0, 3, 1, 2)
        v = np.ones((1, 4, 4))
        loss0, grad = weighted_softmax_xent(logits, targets, v)
        loss1, _ = weighted_softmax_xent(logits - 0.01 * grad, targets, v)
        assert loss1 < loss0


class TestL2Loss:
    def test_zero_for_exact_prediction(self):
        x = np.random.default_rng(19).standard_normal((2, 2, 4, 4))
        loss, grad = l2_loss(x, x.copy())
        assert loss == 0.0
        assert not grad.any()

    def test_single_pixel_off_by_3_4(self):
        pred = np.zeros((1, 2, 1, 1))
        gt = np.zeros_like(pred)
        pred[0, 0, 0, 0] = 3.0
        pred[0, 1, 0, 0] = 4.0
        loss, _ = l2_loss(pred, gt)
        assert loss == pytest.approx(12.5)

    def test_finite_differences(self):
        rng = np.random.default_rng(20)
        worst = 0.0
        for _ in range(20):
            pred = rng.standard_normal((2, 2, 3, 3))
            gt = rng.standard_normal((2, 2, 3, 3))
            _, grad = l2_loss(pred, gt)

            def loss():
                return l2_loss(pred, gt)[0]

            worst = max(worst, max_rel_err(grad, numeric_grad(loss, pred)))
        assert worst < 1e-4


class TestAdam:
    def test_zero_grads_zero_decay_leaves_params(self):
        p = {"w": np.ones((3, 3))}
        st = AdamState(lr=0.1, weight_decay=0.0)
        adam_step(p, {"w": np.zeros((3, 3))}, st)
        np.testing.assert_array_equal(p["w"], 1.0)

    def test_first_step_matches_hand_formula(self):
        rng = np.random.default_rng(21)
        g = rng.standard_normal((4, 4))
        p0 = rng.standard_normal((4, 4))
        p = {"w": p0.copy()}
        st = AdamState(lr=1e-2, weight_decay=0.0)
        adam_step(p, {"w": g.copy()}, st)
        want = p0 - 1e-2 * g / (np.abs(g) + st.eps)
        np.testing.assert_allclose(p["w"], want, atol=1e-10)

    def test_weight_decay_pulls_toward_zero(self):
        p = {"w": np.full((2, 2), 5.0)}
        st = AdamState(lr=1e-3, weight_decay=1e-3)
        adam_step(p, {"w": np.zeros((2, 2))}, st)
        assert np.all(p["w"] < 5.0)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(22)
            p = {"a": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)}
            st = AdamState(lr=1e-3)
            for _ in range(5):
                grads = {k: rng.standard_normal(v.shape) for k, v in p.items()}
                adam_step(p, grads, st)
            return p

        p1, p2 = run(), run()
        np.testing.assert_array_equal(p1["a"], p2["a"])
        np.testing.assert_array_equal(p1["b"], p2["b"])


def test_he_normal_scale():
    rng = np.random.default_rng(23)
    w = he_normal((64, 32, 3, 3), rng, dtype=np.float64)
    assert w.std() == pytest.approx(np.sqrt(2.0 / (32 * 9)), rel=0.05)
