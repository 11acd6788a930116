"""Engine checks: forward kernels against loop oracles, gradients against
central finite differences, and the graph lifecycle rules."""

import numpy as np
import pytest

from autoprune.tensor import (
    RunningStats,
    Tensor,
    backward,
    batch_norm2d,
    channel_scale,
    conv2d,
    finite_diff_check,
    linear,
    no_grad,
    pool2d,
    relu,
    softmax_cross_entropy,
    tensor_sum,
    use_dtype,
    zero_grad,
)

# ---------------------------------------------------------------------------
# oracles: direct-loop references computed in float64


def conv2d_oracle(x, w, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[b, co, i, j] = acc
    return out


def linear_oracle(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, d = x.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            acc = b[j]
            for t in range(d):
                acc += x[i, t] * w[t, j]
            out[i, j] = acc
    return out


def pool2d_oracle(x, kind, window):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    patch = x[b, ch, i * window : (i + 1) * window, j * window : (j + 1) * window]
                    out[b, ch, i, j] = patch.max() if kind == "max" else patch.mean()
    return out


def cross_entropy_oracle(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


# ---------------------------------------------------------------------------
# forward agreement with the oracles


class TestForwardOracles:
    def test_conv2d_matches_loop_oracle_on_random_shapes(self):
        rng = np.random.default_rng(42)
        shapes = [
            (1, 1, 5, 5, 1, 3, 1, 0),
            (2, 3, 8, 8, 4, 3, 1, 1),
            (4, 8, 16, 16, 6, 3, 1, 1),
            (2, 4, 9, 9, 5, 3, 2, 1),
            (3, 2, 16, 16, 4, 5, 1, 2),
            (2, 6, 12, 10, 3, 1, 1, 0),
            (2, 3, 6, 6, 4, 3, 2, 1),
        ]
        for n, cin, h, w, cout, k, stride, pad in shapes:
            x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
            wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
            got = conv2d(Tensor(x), Tensor(wt), stride=stride, padding=pad).data
            want = conv2d_oracle(x, wt, stride=stride, padding=pad)
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_linear_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 11)).astype(np.float32)
        w = rng.standard_normal((11, 4)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, linear_oracle(x, w, b), rtol=1e-5, atol=1e-5)

    def test_pool2d_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 8, 16, 16)).astype(np.float32)
        for kind in ("max", "avg"):
            for window in (2, 4):
                got = pool2d(Tensor(x), kind, window).data
                np.testing.assert_allclose(
                    got, pool2d_oracle(x, kind, window), rtol=1e-5, atol=1e-5
                )

    def test_cross_entropy_matches_float64_oracle(self):
        rng = np.random.default_rng(11)
        logits = (rng.standard_normal((16, 10)) * 30).astype(np.float32)
        labels = rng.integers(0, 10, 16)
        got = float(softmax_cross_entropy(Tensor(logits), labels).data)
        assert abs(got - cross_entropy_oracle(logits, labels)) < 1e-5

    def test_cross_entropy_stays_finite_for_huge_logits(self):
        logits = Tensor(np.array([[1e4, -1e4, 0.0]], dtype=np.float32))
        val = float(softmax_cross_entropy(logits, np.array([0])).data)
        assert np.isfinite(val) and val < 1e-3

    def test_batch_norm_train_normalizes_to_unit_stats(self):
        rng = np.random.default_rng(5)
        x = (rng.standard_normal((8, 3, 6, 6)) * 4 + 2).astype(np.float32)
        stats = RunningStats.zeros(3)
        out = batch_norm2d(
            Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, mode="train"
        ).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_batch_norm_running_stats_update(self):
        rng = np.random.default_rng(9)
        x = (rng.standard_normal((16, 2, 4, 4)) * 3 + 1).astype(np.float32)
        stats = RunningStats.zeros(2)
        batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, mode="train")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(stats.mean, 0.1 * mu, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(stats.var, 0.9 * 1.0 + 0.1 * var, rtol=1e-5, atol=1e-6)

    def test_batch_norm_eval_uses_running_stats(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        stats = RunningStats(
            mean=np.array([1.0, -2.0], dtype=np.float32),
            var=np.array([4.0, 0.25], dtype=np.float32),
        )
        gamma = np.array([2.0, 3.0], dtype=np.float32)
        beta = np.array([0.5, -1.0], dtype=np.float32)
        out = batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta), stats, mode="eval").data
        want = gamma.reshape(1, 2, 1, 1) * (
            x - stats.mean.reshape(1, 2, 1, 1)
        ) / np.sqrt(stats.var.reshape(1, 2, 1, 1) + 1e-5) + beta.reshape(1, 2, 1, 1)
        np.testing.assert_allclose(out, want, rtol=1e-5, atol=1e-6)

    def test_forward_is_bit_identical_across_runs(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = conv2d(Tensor(x), Tensor(w), padding=1).data
        b = conv2d(Tensor(x), Tensor(w), padding=1).data
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# behavioural corner cases


class TestOpSemantics:
    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32), requires_grad=True)
        out = tensor_sum(relu(x))
        backward(out)
        np.testing.assert_array_equal(x.grad, np.array([0.0, 0.0, 1.0], dtype=np.float32))

    def test_max_pool_tie_goes_to_lowest_flat_index(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        t = Tensor(x, requires_grad=True)
        out = tensor_sum(pool2d(t, "max", 2))
        backward(out)
        want = np.zeros((1, 1, 2, 2), dtype=np.float32)
        want[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(t.grad, want)

    def test_channel_scale_matches_manual_broadcast(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        s = np.array([0.0, 0.5, 1.0], dtype=np.float32)
        out = channel_scale(Tensor(x), Tensor(s)).data
        np.testing.assert_allclose(out, x * s.reshape(1, 3, 1, 1), rtol=1e-6)

    def test_channel_scale_by_ones_is_bitwise_identity(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((2, 5, 3, 3)).astype(np.float32)
        out = channel_scale(Tensor(x), Tensor(np.ones(5, dtype=np.float32))).data
        assert np.array_equal(out, x)

    def test_shape_errors_name_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))
        w = Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError, match=r"\(1, 3, 8, 8\).*\(4, 2, 3, 3\)"):
            conv2d(x, w)

    def test_conv_floors_and_ignores_unsampled_edge(self):
        # 7x7 input, 2x2 kernel, stride 2: output floors to 3x3 and the
        # last row/column never enter the computation
        rng = np.random.default_rng(12)
        xv = rng.standard_normal((1, 1, 7, 7)).astype(np.float32)
        wv = rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
        x = Tensor(xv, requires_grad=True)
        out = conv2d(x, Tensor(wv), stride=2)
        assert out.data.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(out.data, conv2d_oracle(xv, wv, stride=2), rtol=1e-5, atol=1e-5)
        backward(tensor_sum(out))
        assert np.all(x.grad[:, :, 6, :] == 0)
        assert np.all(x.grad[:, :, :, 6] == 0)
        assert np.any(x.grad[:, :, :6, :6] != 0)

    def test_conv_kernel_must_fit(self):
        x = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
        with pytest.raises(ValueError, match="exceeds"):
            conv2d(x, w)

    def test_pool_window_must_divide(self):
        x = Tensor(np.zeros((1, 1, 6, 6), dtype=np.float32))
        with pytest.raises(ValueError, match="window"):
            pool2d(x, "max", 4)

    def test_label_out_of_range_raises(self):
        logits = Tensor(np.zeros((2, 3), dtype=np.float32))
        with pytest.raises(ValueError, match="label out of range"):
            softmax_cross_entropy(logits, np.array([0, 3]))

    def test_empty_batch_norm_train_raises(self):
        x = Tensor(np.zeros((0, 2, 3, 3), dtype=np.float32))
        stats = RunningStats.zeros(2)
        with pytest.raises(ValueError, match="empty batch"):
            batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, mode="train")


class TestGraphLifecycle:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        y = relu(x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y)

    def test_backward_twice_raises(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        loss = tensor_sum(relu(x))
        backward(loss)
        with pytest.raises(RuntimeError, match="released"):
            backward(loss)

    def test_every_reachable_tensor_gets_a_grad(self):
        x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32), requires_grad=True)
        w = Tensor(np.full((3, 2, 3, 3), 0.1, dtype=np.float32), requires_grad=True)
        h = conv2d(x, w, padding=1)
        a = relu(h)
        loss = tensor_sum(a)
        backward(loss)
        for t in (x, w, h, a):
            assert t.grad is not None and t.grad.shape == t.data.shape

    def test_grad_accumulates_until_zeroed(self):
        x = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        backward(tensor_sum(relu(x)))
        backward(tensor_sum(relu(x)))
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0, dtype=np.float32))
        zero_grad([x])
        assert x.grad is None

    def test_no_grad_blocks_graph_recording(self):
        x = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        with no_grad():
            y = relu(x)
        assert not y.requires_grad
        with pytest.raises(RuntimeError):
            loss = tensor_sum(y)
            backward(loss)
            backward(loss)

    def test_shared_subexpression_accumulates_both_paths(self):
        x = Tensor(np.array([3.0], dtype=np.float64), requires_grad=True)
        y = x * x
        backward(tensor_sum(y))
        np.testing.assert_allclose(x.grad, [6.0])


# ---------------------------------------------------------------------------
# gradient checks against central finite differences


def _fd_cases(dtype):
    """Scalar functions of one tensor, each well conditioned for differencing.

    Kinked ops (relu, max pool) get inputs kept away from their kinks.
    Linear chains compose with a sign-random weighting bounded away from
    zero, so every gradient entry has usable magnitude.  Each case names
    the float32 step: piecewise-linear chains take a large step (central
    differences are exact for them, and the step averages out rounding),
    curved ones a small step.
    """
    rng = np.random.default_rng(101)

    def t(shape, scale=1.0):
        return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)

    def bounded(shape, lo=0.4, hi=1.2, signed=True):
        arr = rng.uniform(lo, hi, shape)
        if signed:
            arr *= rng.choice([-1.0, 1.0], size=shape)
        return arr.astype(dtype)

    def weighting(shape, lo=0.4, hi=1.2):
        from autoprune.tensor import mul

        arr = Tensor(bounded(shape, lo, hi))
        return lambda u: mul(u, arr)

    BIG, SMALL = 0.05, 0.01
    cases = {}

    x = Tensor(bounded((1, 2, 4, 4), 0.2, 1.2), requires_grad=True)
    w = Tensor(bounded((2, 2, 3, 3), 0.1, 0.4, signed=False), requires_grad=True)
    wt_conv = weighting((1, 2, 4, 4))
    cases["conv_x"] = (lambda v: tensor_sum(wt_conv(conv2d(v, w, padding=1))), x, BIG)
    x2 = Tensor(bounded((1, 2, 4, 4), 0.2, 1.2, signed=False), requires_grad=True)
    w2 = Tensor(bounded((2, 2, 3, 3), 0.1, 0.4), requires_grad=True)
    cases["conv_w"] = (lambda v: tensor_sum(wt_conv(conv2d(x2, v, padding=1))), w2, BIG)

    # relu away from its kink at zero
    xr = Tensor(bounded((3, 5), 0.5, 1.5), requires_grad=True)
    wt_relu = weighting((3, 5))
    cases["relu"] = (lambda v: tensor_sum(wt_relu(relu(v))), xr, BIG)

    labels = np.array([0, 2, 1])
    xl = t((3, 4))
    wl = t((4, 3), 0.4)
    bl = t((3,), 0.2)
    wt_lin = weighting((3, 3))
    cases["linear_x"] = (lambda v: tensor_sum(wt_lin(linear(v, wl, bl))), xl, BIG)
    cases["linear_w"] = (lambda v: softmax_cross_entropy(linear(xl, v, bl), labels), wl, SMALL)
    cases["linear_b"] = (lambda v: softmax_cross_entropy(linear(xl, wl, v), labels), bl, SMALL)

    # max pool with unique spaced entries, so no tie flips nearby
    perm = rng.permutation(2 * 4 * 4).astype(dtype).reshape(1, 2, 4, 4)
    xp = Tensor(perm * 0.5, requires_grad=True)
    wt_pool = weighting((1, 2, 2, 2))
    cases["pool_max"] = (lambda v: tensor_sum(wt_pool(pool2d(v, "max", 2))), xp, BIG)
    xa = t((1, 2, 4, 4))
    cases["pool_avg"] = (lambda v: tensor_sum(wt_pool(pool2d(v, "avg", 2))), xa, BIG)

    xb = t((2, 2, 3, 3), 1.5)
    gb = Tensor(bounded((2,), 0.8, 1.3, signed=False), requires_grad=True)
    bb = t((2,), 0.3)
    sb = RunningStats.zeros(2, dtype=dtype)
    wt_bn = weighting((2, 2, 3, 3))

    def bn_loss(v, g=gb, b=bb):
        return tensor_sum(wt_bn(batch_norm2d(v, g, b, sb, mode="train", update_running=False)))

    cases["bn_x"] = (bn_loss, xb, SMALL)
    xb2 = t((2, 2, 3, 3), 1.5)
    cases["bn_gamma"] = (lambda v: bn_loss(xb2, g=v), gb, SMALL)
    cases["bn_beta"] = (lambda v: bn_loss(xb2, b=v), bb, SMALL)

    xe = t((2, 2, 3, 3), 1.5)
    ge = Tensor(bounded((2,), 0.8, 1.3, signed=False), requires_grad=True)
    be = t((2,), 0.3)
    se = RunningStats(
        mean=(rng.standard_normal(2) * 0.3).astype(dtype),
        var=rng.uniform(0.5, 2.0, 2).astype(dtype),
    )
    cases["bn_eval_x"] = (
        lambda v: tensor_sum(wt_bn(batch_norm2d(v, ge, be, se, mode="eval"))),
        xe,
        BIG,  # eval bn is affine in x
    )

    xs = t((3, 5))
    cases["softmax_ce"] = (
        lambda v: softmax_cross_entropy(v, np.array([0, 2, 4])),
        xs,
        SMALL,
    )

    xc = Tensor(bounded((1, 3, 3, 3), 0.3, 1.2), requires_grad=True)
    sc = Tensor(bounded((3,), 0.3, 1.2), requires_grad=True)
    wt_cs = weighting((1, 3, 3, 3))
    cases["channel_scale_x"] = (lambda v: tensor_sum(wt_cs(channel_scale(v, sc))), xc, BIG)
    xc2 = Tensor(bounded((1, 3, 3, 3), 0.3, 1.2), requires_grad=True)
    cases["channel_scale_s"] = (lambda v: tensor_sum(wt_cs(channel_scale(xc2, v))), sc, BIG)

    return cases


class TestFiniteDifferences:
    def test_all_ops_float32(self):
        for name, (f, x, step) in _fd_cases(np.float32).items():
            err = finite_diff_check(f, x, step=step)
            assert err < 1e-2, f"{name}: max relative error {err:.3e}"

    def test_all_ops_float64(self):
        with use_dtype(np.float64):
            for name, (f, x, _) in _fd_cases(np.float64).items():
                err = finite_diff_check(f, x, step=1e-5)
                assert err < 1e-5, f"{name}: max relative error {err:.3e}"

    def test_step_must_be_positive(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="positive"):
            finite_diff_check(lambda v: tensor_sum(v), x, step=0.0)

    def test_non_scalar_f_rejected(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            finite_diff_check(lambda v: relu(v), x)
