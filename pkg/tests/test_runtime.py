import numpy as np
import pytest

from slimkit import runtime
from slimkit.errors import ConfigError, ShapeError
from slimkit.runtime import OptState


def naive_conv2d(x, w, bias, stride, pad):
    """Six-nested-loop reference convolution."""
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, cout, hout, wout))
    for n in range(b):
        for o in range(cout):
            for i in range(hout):
                for j in range(wout):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[n, c, i * stride + u, j * stride + v]
                                        * w[o, c, u, v])
                    out[n, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


class TestConv2d:
    def test_scalar_multiply(self):
        out = runtime.conv2d_forward(np.full((1, 1, 1, 1), 3.0),
                                     np.full((1, 1, 1, 1), 2.0),
                                     np.zeros(1), stride=1, pad=0)
        assert out.item() == 6.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = runtime.conv2d_forward(x, w, stride=1, pad=1)
        np.testing.assert_array_equal(out, x)

    def test_matches_naive_loop(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for stride, pad in ((1, 0), (1, 1), (2, 1)):
            got = runtime.conv2d_forward(x, w, b, stride=stride, pad=pad)
            want = naive_conv2d(x, w, b, stride, pad)
            np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_channel_mismatch_names_node(self):
        with pytest.raises(ShapeError, match="myconv"):
            runtime.conv2d_forward(np.zeros((1, 2, 4, 4)),
                                   np.zeros((1, 3, 1, 1)), node="myconv")

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            runtime.conv2d_forward(np.zeros((1, 1, 2, 2)),
                                   np.zeros((1, 1, 5, 5)))


class TestBatchnorm:
    def test_direct_substitution(self):
        # tiny eps stands in for the spec's eps=0 arithmetic example
        out = runtime.batchnorm_forward(
            np.full((1, 1, 1, 1), 2.0), gamma=np.array([0.5]),
            beta=np.array([1.0]), running_mean=np.zeros(1),
            running_var=np.ones(1), eps=1e-300)
        assert out.item() == pytest.approx(2.0, abs=1e-12)

    def test_identity_normalization(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = runtime.batchnorm_forward(
            x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=1e-300)
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_train_mode_batch_moments(self, rng):
        x = rng.normal(loc=2.0, scale=3.0, size=(4, 5, 6, 6))
        rm, rv = np.zeros(5), np.ones(5)
        out = runtime.batchnorm_forward(x, np.ones(5), np.zeros(5), rm, rv,
                                        mode="train")
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_ema(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        rm, rv = np.zeros(3), np.ones(3)
        runtime.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv,
                                  mode="train")
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(
            rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-12)

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ConfigError):
            runtime.batchnorm_forward(np.zeros((1, 1, 1, 1)), np.ones(1),
                                      np.zeros(1), np.zeros(1), np.ones(1),
                                      eps=0.0)


class TestElementwiseOps:
    def test_silu_zero(self):
        out = runtime.silu_forward(np.zeros((1, 1, 1, 1)))
        assert out.item() == 0.0

    def test_silu_relu_zero_channel_preservation(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        x[:, 1] = 0.0
        assert np.all(runtime.silu_forward(x)[:, 1] == 0.0)
        assert np.all(runtime.relu_forward(x)[:, 1] == 0.0)

    def test_concat_channel_sum(self, rng):
        a = rng.normal(size=(1, 2, 4, 4))
        b = rng.normal(size=(1, 3, 4, 4))
        out = runtime.concat_forward([a, b])
        assert out.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(out[:, :2], a)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            runtime.concat_forward([np.zeros((1, 1, 4, 4)),
                                    np.zeros((1, 1, 2, 2))])

    def test_maxpool_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = runtime.maxpool2_forward(x)
        assert out.reshape(()) == 4.0

    def test_upsample_doubles(self, rng):
        x = rng.normal(size=(1, 2, 3, 5))
        out = runtime.upsample2_forward(x)
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_array_equal(out[:, :, ::2, ::2], x)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            runtime.add_forward([np.zeros((1, 4, 8, 8)),
                                 np.zeros((1, 5, 8, 8))])


def finite_diff_check(forward, params, n_probe, rng, h=1e-5, tol=1e-4):
    """Central finite differences on randomly probed parameter entries.

    forward() must return the current scalar loss given the (mutated)
    params array; the analytic gradient is compared entry by entry.
    """
    loss, grad = forward()
    flat_p = params.reshape(-1)
    flat_g = grad.reshape(-1)
    idxs = rng.choice(flat_p.size, size=min(n_probe, flat_p.size),
                      replace=False)
    for i in idxs:
        orig = flat_p[i]
        flat_p[i] = orig + h
        lp, _ = forward()
        flat_p[i] = orig - h
        lm, _ = forward()
        flat_p[i] = orig
        num = (lp - lm) / (2 * h)
        denom = max(abs(num), abs(flat_g[i]), 1e-8)
        assert abs(num - flat_g[i]) / denom < tol, (
            f"entry {i}: numeric {num} vs analytic {flat_g[i]}")


class TestBackward:
    def test_conv_weight_grad_sum_loss(self, rng):
        # loss = sum(output): dW[o,c,u,v] = sum of the input patches
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        cache = {}
        out = runtime.conv2d_forward(x, w, stride=1, pad=0, cache=cache)
        _, dw, _ = runtime.conv2d_backward(np.ones_like(out), cache)
        expect = np.zeros_like(w)
        for u in range(3):
            for v in range(3):
                expect[:, :, u, v] = x[:, :, u : u + 3, v : v + 3].sum(axis=(0, 2, 3))
        np.testing.assert_allclose(dw, expect, atol=1e-10)

    def test_conv_finite_difference(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        tgt = rng.normal(size=(2, 3, 6, 6))

        def run():
            cache = {}
            out = runtime.conv2d_forward(x, w, b, stride=1, pad=1, cache=cache)
            loss = 0.5 * ((out - tgt) ** 2).sum()
            dx, dw, db = runtime.conv2d_backward(out - tgt, cache)
            return loss, {"x": dx, "w": dw, "b": db}

        for name, arr in (("x", x), ("w", w), ("b", b)):
            def fwd(n=name):
                loss, grads = run()
                return loss, grads[n]
            finite_diff_check(fwd, arr, 5, rng)

    def test_bn_train_finite_difference(self, rng):
        x = rng.normal(size=(3, 4, 5, 5))
        gamma = rng.normal(size=4) + 1.0
        beta = rng.normal(size=4)
        tgt = rng.normal(size=x.shape)

        def run():
            cache = {}
            out = runtime.batchnorm_forward(x, gamma, beta, np.zeros(4),
                                            np.ones(4), mode="train",
                                            cache=cache)
            loss = 0.5 * ((out - tgt) ** 2).sum()
            dx, dg, db = runtime.batchnorm_backward(out - tgt, cache)
            return loss, {"x": dx, "gamma": dg, "beta": db}

        for name, arr in (("x", x), ("gamma", gamma), ("beta", beta)):
            def fwd(n=name):
                loss, grads = run()
                return loss, grads[n]
            finite_diff_check(fwd, arr, 5, rng)

    def test_bn_gamma_grad_analytic(self, rng):
        # loss = sum(output) -> dgamma = per-channel sum of normalized input
        x = rng.normal(size=(2, 3, 4, 4))
        cache = {}
        out = runtime.batchnorm_forward(x, np.ones(3), np.zeros(3),
                                        np.zeros(3), np.ones(3),
                                        mode="train", cache=cache)
        _, dg, _ = runtime.batchnorm_backward(np.ones_like(out), cache)
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        xhat = (x - mean) / np.sqrt(var + runtime.BN_EPS)
        np.testing.assert_allclose(dg, xhat.sum(axis=(0, 2, 3)), atol=1e-9)

    @pytest.mark.parametrize("op", ["silu", "relu", "maxpool2", "upsample"])
    def test_unary_op_finite_difference(self, rng, op):
        x = rng.normal(size=(2, 3, 4, 4))
        tgt_shape = {"silu": x.shape, "relu": x.shape,
                     "maxpool2": (2, 3, 2, 2), "upsample": (2, 3, 8, 8)}[op]
        tgt = rng.normal(size=tgt_shape)
        fns = {"silu": (runtime.silu_forward, runtime.silu_backward),
               "relu": (runtime.relu_forward, runtime.relu_backward),
               "maxpool2": (runtime.maxpool2_forward, runtime.maxpool2_backward),
               "upsample": (runtime.upsample2_forward, runtime.upsample2_backward)}
        f, bwd = fns[op]

        def fwd():
            cache = {}
            out = f(x, cache=cache)
            loss = 0.5 * ((out - tgt) ** 2).sum()
            return loss, bwd(out - tgt, cache)

        finite_diff_check(fwd, x, 5, rng)

    def test_determinism(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        runs = []
        for _ in range(2):
            cache = {}
            out = runtime.conv2d_forward(x, w, stride=1, pad=1, cache=cache)
            dx, dw, _ = runtime.conv2d_backward(out, cache)
            runs.append((out.tobytes(), dx.tobytes(), dw.tobytes()))
        assert runs[0] == runs[1]


class TestSGD:
    def test_plain_step(self):
        p = np.array([1.0])
        opt = OptState(learning_rate=0.1, momentum=0.0)
        opt.step("p", p, np.array([2.0]))
        np.testing.assert_allclose(p, [0.8])

    def test_zero_grad_fixed_point(self):
        p = np.array([3.0, -1.0])
        opt = OptState(learning_rate=0.5, momentum=0.9)
        opt.step("p", p, np.zeros(2))
        np.testing.assert_array_equal(p, [3.0, -1.0])

    def test_momentum_two_steps(self):
        # v1=1, p1=-0.1; v2=0.9+1=1.9, p2=-0.1-0.19=-0.29
        p = np.array([0.0])
        opt = OptState(learning_rate=0.1, momentum=0.9)
        opt.step("p", p, np.array([1.0]))
        opt.step("p", p, np.array([1.0]))
        np.testing.assert_allclose(p, [-0.29])

    def test_shape_mismatch(self):
        opt = OptState(learning_rate=0.1)
        with pytest.raises(ShapeError):
            opt.step("p", np.zeros(3), np.zeros(4))

    def test_invalid_hyperparameters(self):
        with pytest.raises(ConfigError):
            OptState(learning_rate=0.0)
        with pytest.raises(ConfigError):
            OptState(learning_rate=0.1, momentum=1.0)
