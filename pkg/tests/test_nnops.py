"""Neural primitives against brute-force loop references and closed forms."""
import numpy as np
import pytest

from stflow import nnops, tensor as T
from stflow.nnops import (
    BatchNormParams, Conv2DParams, DenseParams, batchnorm, dense,
    global_pool_spatial, pool_channelwise, same_padding, time_distribute,
)
from stflow.tensor import Rng, Tensor, conv2d, conv2d_transpose, gradcheck, tape

from oracles import (
    conv2d_loop, conv2d_transpose_loop, dense_loop, global_pool_loop,
    channel_pool_loop,
)


def arr(shape, seed, scale=1.0):
    return (np.random.default_rng(seed).standard_normal(shape)
            * scale).astype(np.float32)


class TestConv2d:
    def test_1x1_identity(self):
        x = Tensor(arr((5, 4, 1), 0))
        w = Tensor(np.ones((1, 1, 1, 1), np.float32))
        np.testing.assert_allclose(conv2d(x, w).data, x.data)

    def test_ones_same_padding_counts(self):
        x = Tensor(np.ones((3, 3, 1), np.float32))
        w = Tensor(np.ones((3, 3, 1, 1), np.float32))
        y = conv2d(x, w, padding=same_padding(3, 3)).data[:, :, 0]
        assert y[1, 1] == 9.0
        for corner in (y[0, 0], y[0, 2], y[2, 0], y[2, 2]):
            assert corner == 4.0

    def test_matches_loop_oracle_50_configs(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            h, w_ = rng.integers(3, 8, size=2)
            kh, kw = rng.integers(1, 4, size=2)
            cin, cout = rng.integers(1, 4, size=2)
            sh, sw = rng.integers(1, 3, size=2)
            pads = tuple(int(v) for v in rng.integers(0, 3, size=4))
            if (h + pads[0] + pads[1] - kh) < 0 or \
               (w_ + pads[2] + pads[3] - kw) < 0:
                continue
            x = rng.standard_normal((h, w_, cin)).astype(np.float32)
            k = rng.standard_normal((kh, kw, cin, cout)).astype(np.float32)
            b = rng.standard_normal(cout).astype(np.float32)
            got = conv2d(Tensor(x), Tensor(k), Tensor(b), (sh, sw), pads).data
            want = conv2d_loop(x.astype(np.float64), k.astype(np.float64),
                               b.astype(np.float64), (sh, sw), pads)
            np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-5)

    def test_batched_matches_per_sample(self):
        x = arr((3, 5, 5, 2), 1)
        k = Tensor(arr((3, 3, 2, 4), 2))
        b = Tensor(arr((4,), 3))
        batch = conv2d(Tensor(x), k, b, padding=(1, 1, 1, 1)).data
        for i in range(3):
            single = conv2d(Tensor(x[i]), k, b, padding=(1, 1, 1, 1)).data
            np.testing.assert_allclose(batch[i], single, atol=1e-6)

    def test_nonpositive_output_rejected(self):
        x = Tensor(arr((2, 2, 1), 0))
        w = Tensor(arr((5, 5, 1, 1), 1))
        with pytest.raises(T.ShapeError, match="non-positive"):
            conv2d(x, w)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(T.ShapeError, match="channels"):
            conv2d(Tensor(arr((4, 4, 3), 0)), Tensor(arr((3, 3, 2, 1), 1)))


class TestConvTranspose:
    def test_1x1_identity(self):
        x = Tensor(arr((4, 3, 1), 0))
        w = Tensor(np.ones((1, 1, 1, 1), np.float32))
        np.testing.assert_allclose(conv2d_transpose(x, w).data, x.data)

    def test_k3_s2_scatter_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 2, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 2)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        got = conv2d_transpose(Tensor(x), Tensor(w), Tensor(b),
                               stride=(2, 2)).data
        assert got.shape == (5, 5, 2)
        want = conv2d_transpose_loop(x.astype(np.float64),
                                     w.astype(np.float64),
                                     b.astype(np.float64), (2, 2))
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_k2_s2_doubles(self):
        x = Tensor(arr((2, 4, 2, 6), 0))
        w = Tensor(arr((2, 2, 6, 6), 1, 0.2))
        assert conv2d_transpose(x, w, stride=(2, 2)).shape == (2, 8, 4, 6)

    def test_matches_loop_oracle_50_configs(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            h, w_ = rng.integers(2, 6, size=2)
            kh, kw = rng.integers(1, 4, size=2)
            cin, cout = rng.integers(1, 4, size=2)
            sh, sw = rng.integers(1, 3, size=2)
            x = rng.standard_normal((h, w_, cin)).astype(np.float32)
            k = rng.standard_normal((kh, kw, cin, cout)).astype(np.float32)
            got = conv2d_transpose(Tensor(x), Tensor(k),
                                   stride=(sh, sw)).data
            want = conv2d_transpose_loop(x.astype(np.float64),
                                         k.astype(np.float64), None,
                                         (sh, sw))
            np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-5)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(17)
        for stride, pad, h in [((1, 1), (0, 0, 0, 0), 5),
                               ((2, 2), (1, 1, 1, 1), 7),
                               ((2, 2), (0, 0, 0, 0), 6)]:
            a = rng.standard_normal((1, h, h, 3))
            w = rng.standard_normal((3, 3, 3, 4)) if stride == (1, 1) else \
                rng.standard_normal((3, 3, 3, 4))
            if stride == (2, 2) and pad == (0, 0, 0, 0):
                w = rng.standard_normal((2, 2, 3, 4))
            y = conv2d(Tensor(a), Tensor(w), stride=stride, padding=pad)
            probe = rng.standard_normal(y.shape)
            lhs = float((y.data * probe).sum())
            back = conv2d_transpose(Tensor(probe[0]),
                                    Tensor(w.transpose(0, 1, 3, 2)),
                                    stride=stride, padding=pad)
            rhs = float((a[0] * back.data).sum())
            assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))

    def test_gradcheck(self):
        rng = np.random.default_rng(19)
        x = Tensor(rng.standard_normal((1, 3, 3, 2)), dtype=np.float64)
        w = Tensor(rng.standard_normal((2, 2, 2, 3)), dtype=np.float64)

        def f(t):
            return T.tsum(T.tanh(conv2d_transpose(t, w, stride=(2, 2))))

        assert gradcheck(f, x) < 1e-7


class TestDense:
    def test_identity_weights(self):
        x = Tensor(arr((4,), 0))
        np.testing.assert_allclose(
            dense(x, Tensor(np.eye(4, dtype=np.float32)),
                  Tensor(np.zeros(4, np.float32))).data, x.data)

    def test_zero_weights_gives_bias(self):
        x = Tensor(arr((3,), 1))
        c = np.array([5.0, -1.0], np.float32)
        out = dense(x, Tensor(np.zeros((3, 2), np.float32)), Tensor(c))
        np.testing.assert_allclose(out.data, c)

    def test_matches_matvec_loop(self):
        rng = np.random.default_rng(5)
        for seed in range(10):
            x = rng.standard_normal(6)
            w = rng.standard_normal((6, 4))
            b = rng.standard_normal(4)
            got = dense(Tensor(x.astype(np.float32)),
                        Tensor(w.astype(np.float32)),
                        Tensor(b.astype(np.float32))).data
            np.testing.assert_allclose(got, dense_loop(x, w, b), atol=1e-5)

    def test_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            dense(Tensor(arr((3,), 0)), Tensor(arr((4, 2), 1)))


class TestBatchNorm:
    def test_constant_input_zeros(self):
        p = BatchNormParams.create(3)
        x = Tensor(np.full((4, 2, 2, 3), 7.0, np.float32))
        out = batchnorm(x, p, train=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-3)

    def test_zero_gamma_gives_beta(self):
        p = BatchNormParams.create(2)
        p.gamma.data[:] = 0.0
        p.beta.data[:] = np.array([1.5, -2.0], np.float32)
        out = batchnorm(Tensor(arr((4, 3, 3, 2), 0)), p, train=True)
        np.testing.assert_allclose(out.data[..., 0], 1.5, atol=1e-6)
        np.testing.assert_allclose(out.data[..., 1], -2.0, atol=1e-6)

    def test_normalizes_per_channel(self):
        p = BatchNormParams.create(3)
        x = Tensor(arr((8, 4, 4, 3), 2, scale=3.0) + 1.0)
        out = batchnorm(x, p, train=True).data
        for c in range(3):
            assert abs(out[..., c].mean()) < 1e-5
            assert abs(out[..., c].var() - 1.0) < 1e-4

    def test_train_batch_one_rejected(self):
        p = BatchNormParams.create(2)
        with pytest.raises(T.ShapeError, match="batch"):
            batchnorm(Tensor(arr((1, 2, 2, 2), 0)), p, train=True)

    def test_eval_uses_running_stats(self):
        p = BatchNormParams.create(2)
        p.running_mean = np.array([1.0, 2.0], np.float32)
        p.running_var = np.array([4.0, 9.0], np.float32)
        x = Tensor(np.array([[[[1.0, 2.0]]], [[[3.0, 5.0]]]], np.float32))
        out = batchnorm(x, p, train=False).data
        np.testing.assert_allclose(out[0, 0, 0], [0.0, 0.0], atol=1e-5)
        np.testing.assert_allclose(out[1, 0, 0], [1.0, 1.0], atol=1e-3)

    def test_running_stats_update_in_train_only(self):
        p = BatchNormParams.create(2)
        before = p.running_mean.copy()
        batchnorm(Tensor(arr((4, 2, 2, 2), 1) + 5), p, train=False)
        np.testing.assert_array_equal(p.running_mean, before)
        batchnorm(Tensor(arr((4, 2, 2, 2), 1) + 5), p, train=True)
        assert not np.array_equal(p.running_mean, before)

    def test_gradcheck_train_mode(self):
        p = BatchNormParams.create(2, dtype=np.float64)
        x = Tensor(np.random.default_rng(3).standard_normal((4, 3, 3, 2)),
                   dtype=np.float64)

        def f(t):
            return T.tsum(T.tanh(batchnorm(t, p, train=True)))

        # the batch-statistics path has high curvature; shrink the step to
        # keep central-difference truncation below the bar
        assert gradcheck(f, x, eps=5e-5) < 1e-7


class TestActivationGradients:
    def test_tanh_gradient_closed_form(self):
        x = np.random.default_rng(0).standard_normal((3, 3))
        xt = Tensor(x, requires_grad=True, dtype=np.float64)
        with tape() as tp:
            tp.backward(T.tsum(T.tanh(xt)))
        np.testing.assert_allclose(xt.grad, 1 - np.tanh(x) ** 2, atol=1e-12)


class TestPooling:
    def test_global_constant(self):
        x = Tensor(np.full((3, 4, 2), 2.5, np.float32))
        for kind in ("avg", "max"):
            out = global_pool_spatial(x, kind)
            assert out.shape == (1, 1, 2)
            np.testing.assert_allclose(out.data, 2.5)

    def test_global_avg_example(self):
        x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]],
                            np.float32).reshape(2, 2, 1))
        assert float(global_pool_spatial(x, "avg").data) == 4.0

    def test_channelwise_single_channel_identity(self):
        x = Tensor(arr((3, 3, 1), 0))
        np.testing.assert_allclose(pool_channelwise(x, "max").data, x.data)
        np.testing.assert_allclose(pool_channelwise(x, "avg").data, x.data)

    def test_channelwise_max_example(self):
        x = Tensor(np.array([1.0, 5.0], np.float32).reshape(1, 1, 2))
        assert float(pool_channelwise(x, "max").data) == 5.0

    def test_matches_loop_oracles(self):
        rng = np.random.default_rng(23)
        for seed in range(10):
            x = rng.standard_normal((4, 5, 3)).astype(np.float32)
            for kind in ("avg", "max"):
                np.testing.assert_allclose(
                    global_pool_spatial(Tensor(x), kind).data,
                    global_pool_loop(x.astype(np.float64), kind), atol=1e-5)
                np.testing.assert_allclose(
                    pool_channelwise(Tensor(x), kind).data,
                    channel_pool_loop(x.astype(np.float64), kind), atol=1e-5)


class TestTimeDistribute:
    def test_single_frame_equals_plain(self):
        p = Conv2DParams.create(Rng(0), 2, 3, 3)
        x = arr((1, 4, 4, 2), 0)
        td = time_distribute(lambda f: nnops.conv_layer(f, p), Tensor(x))
        plain = nnops.conv_layer(Tensor(x[0]), p)
        np.testing.assert_allclose(td.data[0], plain.data, atol=1e-6)

    def test_identity_layer(self):
        x = Tensor(arr((2, 3, 4, 4, 2), 1))
        out = time_distribute(lambda f: f, x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_commutes_with_frame_permutation(self):
        p = Conv2DParams.create(Rng(1), 2, 4, 3)
        x = arr((2, 5, 4, 4, 2), 2)
        perm = [3, 0, 4, 1, 2]
        layer = lambda f: nnops.conv_layer(f, p)
        out = time_distribute(layer, Tensor(x)).data
        out_perm = time_distribute(layer, Tensor(x[:, perm])).data
        np.testing.assert_allclose(out[:, perm], out_perm, atol=1e-6)
