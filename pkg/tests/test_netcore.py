"""Tensor-core tests: convolution oracles, adjointness, losses, gradients, Adam."""

import numpy as np
import pytest

from shockcast import netcore
from shockcast.netcore import (
    AdamState,
    ConvLayerParams,
    GraphStateError,
    ShapeError,
    Tape,
    adam_step,
    conv2d_forward,
    custom_loss,
    deconv2d_forward,
    mae,
    mse,
    relu,
    skip_add,
    smoothed_mse,
)


def make_params(rng, c_in, c_out, mode="conv", dtype=np.float64, bias=True):
    k = rng.standard_normal((c_out, c_in, 3, 3)).astype(dtype)
    b = rng.standard_normal(c_out).astype(dtype) if bias else np.zeros(c_out, dtype)
    return ConvLayerParams(kernels=k, biases=b, mode=mode)


def conv2d_naive(x, p):
    """Direct 6-nested-loop reference for conv2d_forward."""
    bn, cn, h, w = x.shape
    on = p.out_channels
    out = np.zeros((bn, on, h, w), dtype=np.float64)
    for b in range(bn):
        for o in range(on):
            for i in range(h):
                for j in range(w):
                    s = float(p.biases[o])
                    for u in range(3):
                        for v in range(3):
                            ii, jj = i + u - 1, j + v - 1
                            if 0 <= ii < h and 0 <= jj < w:
                                for c in range(cn):
                                    s += float(x[b, c, ii, jj]) * float(p.kernels[o, c, u, v])
                    out[b, o, i, j] = s
    return out


class TestConv2d:
    def test_identity_kernel(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        p = ConvLayerParams(kernels=k, biases=np.zeros(1))
        x = np.random.default_rng(0).standard_normal((2, 1, 6, 7))
        np.testing.assert_allclose(conv2d_forward(x, p), x, rtol=0, atol=1e-12)

    def test_all_ones_padding_counts(self):
        # all-ones 5x5 input, all-ones kernel: interior 9, edges 6, corners 4
        p = ConvLayerParams(kernels=np.ones((1, 1, 3, 3)), biases=np.zeros(1))
        x = np.ones((1, 1, 5, 5))
        out = conv2d_forward(x, p)[0, 0]
        assert out[2, 2] == 9
        assert out[0, 2] == 6 and out[2, 0] == 6 and out[4, 2] == 6
        assert out[0, 0] == 4 and out[4, 4] == 4 and out[0, 4] == 4

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        for c_in, c_out, h, w, bn in [(1, 1, 4, 5, 1), (3, 2, 5, 4, 2), (2, 4, 6, 6, 1)]:
            p = make_params(rng, c_in, c_out)
            x = rng.standard_normal((bn, c_in, h, w))
            got = conv2d_forward(x, p)
            ref = conv2d_naive(x, p)
            np.testing.assert_allclose(got, ref, rtol=1e-6)

    def test_channel_mismatch(self):
        p = make_params(np.random.default_rng(0), 3, 2)
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((1, 2, 4, 4)), p)

    def test_shape_preserved_small_sizes(self):
        rng = np.random.default_rng(1)
        for h, w in [(1, 1), (1, 5), (2, 3), (8, 8)]:
            p = make_params(rng, 2, 3)
            out = conv2d_forward(rng.standard_normal((2, 2, h, w)), p)
            assert out.shape == (2, 3, h, w)


class TestDeconv2d:
    def test_identity_kernel(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        p = ConvLayerParams(kernels=k, biases=np.zeros(1), mode="deconv")
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
        np.testing.assert_allclose(deconv2d_forward(x, p), x, atol=1e-12)

    def test_impulse_stamps_kernel(self):
        rng = np.random.default_rng(3)
        k = rng.standard_normal((1, 1, 3, 3))
        p = ConvLayerParams(kernels=k, biases=np.zeros(1), mode="deconv")
        x = np.zeros((1, 1, 7, 7))
        x[0, 0, 3, 4] = 1.0
        out = deconv2d_forward(x, p)[0, 0]
        # output(i0+u-1, j0+v-1) == k[u, v]: the kernel stamped around the impulse
        np.testing.assert_allclose(out[2:5, 3:6], k[0, 0], atol=1e-12)
        assert np.count_nonzero(out) == 9

    def test_adjoint_identity(self):
        # <conv(x; K), y> == <x, deconv(y; K with channel roles swapped)>
        rng = np.random.default_rng(11)
        for _ in range(25):
            c_in, c_out = rng.integers(1, 5, size=2)
            h, w = rng.integers(1, 9, size=2)
            bn = int(rng.integers(1, 3))
            k = rng.standard_normal((c_out, c_in, 3, 3))
            x = rng.standard_normal((bn, c_in, h, w))
            y = rng.standard_normal((bn, c_out, h, w))
            p = ConvLayerParams(kernels=k, biases=np.zeros(c_out))
            pt = ConvLayerParams(
                kernels=np.ascontiguousarray(np.swapaxes(k, 0, 1)),
                biases=np.zeros(c_in),
                mode="deconv",
            )
            lhs = float(np.sum(conv2d_forward(x, p) * y))
            rhs = float(np.sum(x * deconv2d_forward(y, pt)))
            assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs), 1.0)


class TestElementwise:
    def test_relu(self):
        assert np.all(relu(-np.ones((1, 1, 2, 2))) == 0)
        x = np.abs(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
        np.testing.assert_array_equal(relu(x), x)
        m = np.array([[[[-1.0, 2.0], [3.0, -4.0]]]])
        np.testing.assert_array_equal(relu(m), [[[[0.0, 2.0], [3.0, 0.0]]]])

    def test_skip_add(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(skip_add(a, np.zeros_like(a)), a)
        np.testing.assert_allclose(skip_add(a, -a), 0, atol=1e-15)
        np.testing.assert_array_equal(skip_add(a, b), skip_add(b, a))
        with pytest.raises(ShapeError):
            skip_add(a, np.zeros((2, 3, 4, 5)))


class TestLosses:
    def test_mse_trivial(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 4, 4))
        assert mse(x, x) == 0.0
        assert abs(mse(x + 0.1, x) - 0.01) < 1e-12

    def test_mse_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        p = rng.standard_normal((2, 1, 5, 6))
        t = rng.standard_normal((2, 1, 5, 6))
        acc = 0.0
        for idx in np.ndindex(p.shape):
            acc += (float(p[idx]) - float(t[idx])) ** 2
        assert abs(mse(p, t) - acc / p.size) < 1e-12

    def test_mae(self):
        rng = np.random.default_rng(6)
        p = rng.standard_normal((1, 1, 6, 6))
        t = rng.standard_normal((1, 1, 6, 6))
        assert mae(p, p) == 0.0
        assert abs(mae(p + 0.1, p) - 0.1) < 1e-12
        acc = sum(abs(float(p[i]) - float(t[i])) for i in np.ndindex(p.shape))
        assert abs(mae(p, t) - acc / p.size) < 1e-12

    def test_smoothed_mse_zero_when_equal(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 12, 12))
        for w in (10, 5, 3):
            assert smoothed_mse(x, x, w) == 0.0

    def test_smoothing_attenuates_checkerboard(self):
        # zero-mean alternating difference: the 3x3 mean shrinks it
        h = w = 12
        cb = np.indices((h, w)).sum(axis=0) % 2 * 2.0 - 1.0
        p = cb[None, None]
        t = np.zeros_like(p)
        assert smoothed_mse(p, t, 3) < mse(p, t)

    def test_constant_difference_interior(self):
        # constant offset: smoothing preserves it away from edges
        p = np.full((1, 1, 20, 20), 0.7)
        t = np.full((1, 1, 20, 20), 0.4)
        from shockcast.boxfilter import box_mean_2d

        sp = box_mean_2d(p[0, 0], 3)
        st = box_mean_2d(t[0, 0], 3)
        d = (sp - st)[1:-1, 1:-1]
        np.testing.assert_allclose(d, 0.3, atol=1e-12)
        assert abs(mse(p, t) - 0.09) < 1e-12

    def test_custom_loss_composition(self):
        rng = np.random.default_rng(9)
        p = rng.standard_normal((2, 1, 16, 16))
        t = rng.standard_normal((2, 1, 16, 16))
        expected = mse(p, t) + 1000.0 * (
            smoothed_mse(p, t, 10) + smoothed_mse(p, t, 5) + smoothed_mse(p, t, 3)
        )
        assert abs(custom_loss(p, t) - expected) < 1e-12 * max(1.0, abs(expected))
        assert custom_loss(p, p) == 0.0
        assert custom_loss(p, t) >= mse(p, t)


def finite_difference(f, arr, h=1e-5):
    """Central finite differences of scalar f with respect to arr, in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.max(np.abs(a - b) / denom)


class TestBackward:
    def test_linear_regression_closed_form(self):
        # a 1x1-channel conv with only the center tap active is x @ w + b;
        # MSE gradient must equal 2 X^T (Xw - y) / n elementwise.
        rng = np.random.default_rng(21)
        n = 6
        x = rng.standard_normal((n, 1, 1, 1))
        y = rng.standard_normal((n, 1, 1, 1))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = rng.standard_normal()
        p = ConvLayerParams(kernels=k, biases=np.zeros(1))
        tape = Tape()
        pred = tape.conv2d(x, p)
        loss = tape.mse_loss(pred, y)
        grads = tape.backward(loss)
        xv = x.ravel()
        resid = xv * k[0, 0, 1, 1] - y.ravel()
        expected_dw = 2.0 * float(xv @ resid) / n
        got = grads.wrt(p.kernels)
        assert abs(got[0, 0, 1, 1] - expected_dw) < 1e-10
        expected_db = 2.0 * float(resid.sum()) / n
        assert abs(grads.wrt(p.biases)[0] - expected_db) < 1e-10

    def test_micro_net_finite_differences(self):
        rng = np.random.default_rng(42)
        x = rng.uniform(0.1, 1.0, size=(1, 1, 8, 8))
        y = rng.uniform(0.0, 1.0, size=(1, 1, 8, 8))
        p1 = make_params(rng, 1, 2)
        p2 = make_params(rng, 2, 1, mode="deconv")
        p1.biases += 0.3  # keep ReLU inputs away from the kink
        p2.biases += 0.3

        def run(loss_kind):
            tape = Tape()
            h = tape.relu(tape.conv2d(x, p1))
            pred = tape.deconv2d(h, p2)
            if loss_kind == "mse":
                return tape, tape.mse_loss(pred, y)
            return tape, tape.custom_loss(pred, y)

        for loss_kind, plain in [("mse", lambda: mse(forward(), y)),
                                 ("custom", lambda: custom_loss(forward(), y))]:
            def forward():
                return deconv2d_forward(relu(conv2d_forward(x, p1)), p2)

            tape, loss = run(loss_kind)
            grads = tape.backward(loss)
            for arr in (p1.kernels, p1.biases, p2.kernels, p2.biases):
                fd = finite_difference(plain, arr)
                an = grads.wrt(arr)
                assert rel_err(an, fd) < 1e-4, f"{loss_kind} gradient mismatch"

    def test_input_gradient_finite_differences(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, 2, 5, 5))
        y = rng.standard_normal((2, 1, 5, 5))
        p = make_params(rng, 2, 1)

        def plain():
            return mse(conv2d_forward(x, p), y)

        tape = Tape()
        loss = tape.mse_loss(tape.conv2d(x, p), y)
        an = tape.backward(loss).wrt(x)
        fd = finite_difference(plain, x)
        assert rel_err(an, fd) < 1e-4

    def test_skip_add_passes_gradient_to_both_branches(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((1, 1, 4, 4))
        b = rng.standard_normal((1, 1, 4, 4))
        y = rng.standard_normal((1, 1, 4, 4))
        tape = Tape()
        s = tape.add(a, b)
        loss = tape.mse_loss(s, y)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads.wrt(a), grads.wrt(b))
        expected = 2.0 * (a + b - y) / a.size
        np.testing.assert_allclose(grads.wrt(a), expected, rtol=1e-12)

    def test_backward_before_forward_is_state_error(self):
        tape = Tape()
        with pytest.raises(GraphStateError):
            tape.backward(np.float64(0.0).reshape(()))

    def test_backward_on_foreign_loss_is_state_error(self):
        tape = Tape()
        tape.relu(np.ones((1, 1, 2, 2)))
        with pytest.raises(GraphStateError):
            tape.backward(np.float64(1.0).reshape(()))

    def test_smoothed_loss_gradient(self):
        rng = np.random.default_rng(33)
        pred = rng.standard_normal((1, 1, 9, 9))
        target = rng.standard_normal((1, 1, 9, 9))
        for w in (3, 5, 10):
            def plain():
                return smoothed_mse(pred, target, w)

            tape = Tape()
            loss = tape.smoothed_mse_loss(pred, target, w)
            an = tape.backward(loss).wrt(pred)
            fd = finite_difference(plain, pred)
            assert rel_err(an, fd) < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = [np.array([1.0, -2.0]), np.array([[3.0]])]
        snap = [a.copy() for a in p]
        st = AdamState.for_params(p)
        adam_step(p, [np.zeros_like(a) for a in p], st)
        for a, s in zip(p, snap):
            np.testing.assert_array_equal(a, s)
        assert st.step_count == 1

    def test_single_step_bias_correction(self):
        p = [np.array([1.0])]
        st = AdamState.for_params(p, learning_rate=0.001)
        adam_step(p, [np.array([1.0])], st)
        assert abs(p[0][0] - (1.0 - 0.001 / (1.0 + 1e-8))) < 1e-12

    def test_quadratic_convergence_matches_reference(self):
        # independent scalar recurrence of the published update rule
        theta_ref = 1.0
        m = v = 0.0
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        for t in range(1, 2001):
            g = 2.0 * theta_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            theta_ref -= lr * mh / (np.sqrt(vh) + eps)

        p = [np.array([1.0])]
        st = AdamState.for_params(p, learning_rate=0.01)
        for _ in range(2000):
            adam_step(p, [2.0 * p[0]], st)
        assert abs(p[0][0]) < 1e-3
        assert abs(p[0][0] - theta_ref) < 1e-9

    def test_shape_mismatch(self):
        p = [np.zeros(3)]
        st = AdamState.for_params(p)
        with pytest.raises(ShapeError):
            adam_step(p, [np.zeros(4)], st)


class TestDeterminism:
    def test_fixed_seed_bitwise_identical(self):
        def once():
            rng = np.random.default_rng(123)
            x = rng.standard_normal((2, 3, 10, 10)).astype(np.float32)
            y = rng.standard_normal((2, 1, 10, 10)).astype(np.float32)
            p1 = make_params(rng, 3, 2, dtype=np.float32)
            p2 = make_params(rng, 2, 1, dtype=np.float32, mode="deconv")
            tape = Tape()
            h = tape.relu(tape.conv2d(x, p1))
            pred = tape.deconv2d(h, p2)
            loss = tape.custom_loss(pred, y)
            grads = tape.backward(loss)
            st = AdamState.for_params([p1.kernels, p2.kernels])
            adam_step([p1.kernels, p2.kernels],
                      grads.for_params([p1.kernels, p2.kernels]), st)
            return float(loss), p1.kernels.copy(), p2.kernels.copy()

        l1, k1, k2 = once()
        l2, k1b, k2b = once()
        assert l1 == l2
        np.testing.assert_array_equal(k1, k1b)
        np.testing.assert_array_equal(k2, k2b)
