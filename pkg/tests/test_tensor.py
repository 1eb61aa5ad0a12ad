"""Op-level unit tests for the autodiff engine: hand examples, brute-force
loop oracles, and finite-difference gradient checks."""

import numpy as np
import pytest

from fuseseg import tensor as T
from fuseseg.tensor import ShapeError, Tape, Tensor


# ---------------------------------------------------------------------------
# Brute-force oracles (written against the op contracts, not the implementations)
# ---------------------------------------------------------------------------


def conv3d_oracle(x, kernel, bias, stride, padding):
    """Nested-loop 3-d cross-correlation. x: [N,D,H,W,Ci], kernel: [k,k,k,Ci,Co]."""
    n, d, h, w, ci = x.shape
    k = kernel.shape[0]
    co = kernel.shape[4]
    p = padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    do = (d + 2 * p - k) // stride + 1
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    y = np.zeros((n, do, ho, wo, co), dtype=np.float64)
    for ni in range(n):
        for z in range(do):
            for yy in range(ho):
                for xx in range(wo):
                    for oc in range(co):
                        acc = 0.0
                        for a in range(k):
                            for b in range(k):
                                for c in range(k):
                                    for ic in range(ci):
                                        acc += (
                                            xp[ni, z * stride + a, yy * stride + b, xx * stride + c, ic]
                                            * kernel[a, b, c, ic, oc]
                                        )
                        y[ni, z, yy, xx, oc] = acc + (0.0 if bias is None else bias[oc])
    return y


def deconv3d_oracle(x, kernel):
    """Brute-force scatter for the stride-2 3x3x3 transposed convolution.

    kernel: [3,3,3,Co,Ci]; output extent is exactly double the input extent.
    """
    n, d, h, w, ci = x.shape
    co = kernel.shape[3]
    yp = np.zeros((n, 2 * d + 2, 2 * h + 2, 2 * w + 2, co), dtype=np.float64)
    for ni in range(n):
        for z in range(d):
            for yy in range(h):
                for xx in range(w):
                    for a in range(3):
                        for b in range(3):
                            for c in range(3):
                                for oc in range(co):
                                    for ic in range(ci):
                                        yp[ni, 2 * z + a, 2 * yy + b, 2 * xx + c, oc] += (
                                            x[ni, z, yy, xx, ic] * kernel[a, b, c, oc, ic]
                                        )
    return yp[:, 1 : 1 + 2 * d, 1 : 1 + 2 * h, 1 : 1 + 2 * w, :]


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    y = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                y[i, j] += a[i, t] * b[t, j]
    return y


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


class TestElementwise:
    def test_relu6_hand_values(self):
        y = T.relu6(Tensor([-1.0, 3.0, 9.0]))
        np.testing.assert_array_equal(y.data, [0.0, 3.0, 6.0])

    def test_relu6_subgradient_zero_at_kinks(self):
        x = Tensor([0.0, 6.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.relu6(x))
            T.backward(loss)
        tape.clear()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_dropout_p0_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.0, "train", np.random.default_rng(0)) is x

    def test_dropout_eval_identity(self):
        x = Tensor(np.arange(6.0))
        assert T.dropout(x, 0.9, "eval") is x

    def test_dropout_mean_preserving(self):
        x = Tensor(np.ones(10**6, dtype=np.float64))
        y = T.dropout(x, 0.5, "train", np.random.default_rng(0))
        assert abs(y.data.mean() - 1.0) < 0.01

    def test_dropout_rejects_bad_p(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, "train", np.random.default_rng(0))

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_large_logits_no_overflow(self):
        y = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(y).all()
        np.testing.assert_allclose(y, [1.0, 0.0])

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).standard_normal((7, 11)))
        s = T.softmax(x, axis=1).data.sum(axis=1)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)

    def test_tensor_rejects_order_above_5(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1, 1)))


class TestMatmul:
    def test_identity(self):
        m = np.random.default_rng(0).standard_normal((4, 4))
        np.testing.assert_allclose(T.matmul(Tensor(np.eye(4)), Tensor(m)).data, m)

    def test_hand_case(self):
        y = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(y.data, [[3.0], [7.0]])

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        y = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(y.data, matmul_oracle(a, b), rtol=1e-10)

    def test_inner_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


class TestUnfoldFold:
    def test_roundtrip_bit_identical(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 2, 2, 3)).astype(np.float32)
        y = T.fold(T.unfold(Tensor(x)), (2, 2, 2))
        assert np.array_equal(y.data, x)

    def test_unfold_shape(self):
        assert T.unfold(Tensor(np.zeros((1, 2, 3, 4, 5)))).shape == (1, 24, 5)

    def test_row_major_index_map(self):
        d, h, w = 2, 3, 4
        x = np.zeros((1, d, h, w, 1), dtype=np.float32)
        x[0, 1, 2, 3, 0] = 7.0
        seq = T.unfold(Tensor(x)).data
        assert seq[0, 1 * h * w + 2 * w + 3, 0] == 7.0

    def test_fold_rejects_product_mismatch(self):
        with pytest.raises(ShapeError):
            T.fold(Tensor(np.zeros((1, 9, 2))), (2, 2, 2))


# ---------------------------------------------------------------------------
# Convolutions vs oracles
# ---------------------------------------------------------------------------


class TestConv3dOracle:
    def test_exhaustive_small_shapes(self):
        rng = np.random.default_rng(0)
        for ext in (1, 2, 4):
            for cin in (1, 2, 3):
                for cout in (1, 2):
                    for k in (1, 3):
                        for stride in (1, 2):
                            for padding in (0, 1):
                                if ext + 2 * padding < k:
                                    continue
                                x = rng.standard_normal((1, ext, ext, ext, cin))
                                kern = rng.standard_normal((k, k, k, cin, cout))
                                bias = rng.standard_normal(cout)
                                y = T.conv3d(
                                    Tensor(x, dtype=np.float64),
                                    Tensor(kern, dtype=np.float64),
                                    Tensor(bias, dtype=np.float64),
                                    stride=stride,
                                    padding=padding,
                                )
                                ref = conv3d_oracle(x, kern, bias, stride, padding)
                                np.testing.assert_allclose(y.data, ref, rtol=1e-6, atol=1e-12)

    def test_identity_kernel_preserves_input(self):
        # 1x1x1 identity kernel with matching channels
        x = np.random.default_rng(0).standard_normal((2, 3, 3, 3, 2)).astype(np.float32)
        kern = np.eye(2, dtype=np.float32).reshape(1, 1, 1, 2, 2)
        y = T.conv3d(Tensor(x), Tensor(kern))
        np.testing.assert_allclose(y.data, x, rtol=1e-6)

    def test_shape_halving_stride2(self):
        x = Tensor(np.zeros((1, 16, 16, 16, 16), dtype=np.float32))
        kern = Tensor(np.zeros((3, 3, 3, 16, 32), dtype=np.float32))
        assert T.conv3d(x, kern, stride=2, padding=1).shape == (1, 8, 8, 8, 32)

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv3d(Tensor(np.zeros((1, 4, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 3, 1))))

    def test_rejects_kernel_smaller_than_input(self):
        with pytest.raises(ShapeError):
            T.conv3d(Tensor(np.zeros((1, 1, 1, 1, 1))), Tensor(np.zeros((3, 3, 3, 1, 1))))


class TestDeconv3dOracle:
    def test_single_voxel_scatters_kernel_taps(self):
        x = np.ones((1, 1, 1, 1, 1))
        kern = np.ones((3, 3, 3, 1, 1))
        y = T.deconv3d(Tensor(x, dtype=np.float64), Tensor(kern, dtype=np.float64))
        np.testing.assert_allclose(y.data, deconv3d_oracle(x, kern))

    def test_random_against_scatter_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 3, 2, 3))
        kern = rng.standard_normal((3, 3, 3, 2, 3))
        y = T.deconv3d(Tensor(x, dtype=np.float64), Tensor(kern, dtype=np.float64))
        np.testing.assert_allclose(y.data, deconv3d_oracle(x, kern), rtol=1e-6)

    def test_zero_input_zero_output(self):
        y = T.deconv3d(Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(np.ones((3, 3, 3, 4, 2))))
        assert not y.data.any()
        assert y.shape == (1, 4, 4, 4, 4)

    def test_adjointness_with_conv3d(self):
        # <deconv(x), y> == <x, conv_s2_p1(y)> where conv uses the transposed kernel layout
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 2, 2, 3))
        kern = rng.standard_normal((3, 3, 3, 2, 3))  # deconv layout [k,k,k,Co,Ci]
        y = rng.standard_normal((1, 4, 4, 4, 2))
        lhs = float((T.deconv3d(Tensor(x, dtype=np.float64), Tensor(kern, dtype=np.float64)).data * y).sum())
        # the same memory layout read as a conv kernel [k,k,k,Ci=2,Co=3] is the adjoint map
        rhs = float(
            (
                T.conv3d(Tensor(y, dtype=np.float64), Tensor(kern, dtype=np.float64), stride=2, padding=1).data
                * x
            ).sum()
        )
        assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(lhs))

    def test_rejects_non_stride2(self):
        with pytest.raises(ShapeError):
            T.deconv3d(Tensor(np.zeros((1, 2, 2, 2, 1))), Tensor(np.zeros((3, 3, 3, 1, 1))), stride=1)


# ---------------------------------------------------------------------------
# Batch norm
# ---------------------------------------------------------------------------


def _bn_params(c, dtype=np.float64):
    return (
        Tensor(np.ones(c, dtype=dtype)),
        Tensor(np.zeros(c, dtype=dtype)),
        Tensor(np.zeros(c, dtype=dtype)),
        Tensor(np.ones(c, dtype=dtype)),
    )


class TestBatchNorm:
    def test_normalized_input_is_fixed_point(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3, 3, 3, 2))
        x = (x - x.mean(axis=(0, 1, 2, 3))) / x.std(axis=(0, 1, 2, 3))
        gamma, beta, rm, rv = _bn_params(2)
        y = T.batchnorm3d(Tensor(x, dtype=np.float64), gamma, beta, rm, rv, "train")
        np.testing.assert_allclose(y.data, x, atol=1e-4)

    def test_gamma_zero_gives_beta(self):
        gamma = Tensor(np.zeros(3))
        beta = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32))
        rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
        x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 2, 2, 3)).astype(np.float32))
        y = T.batchnorm3d(x, gamma, beta, rm, rv, "train")
        np.testing.assert_allclose(y.data, np.broadcast_to(beta.data, y.shape))

    def test_train_output_statistics(self):
        rng = np.random.default_rng(1)
        x = Tensor(2.0 + 3.0 * rng.standard_normal((4, 4, 4, 4, 3)), dtype=np.float64)
        gamma, beta, rm, rv = _bn_params(3)
        y = T.batchnorm3d(x, gamma, beta, rm, rv, "train").data
        assert np.abs(y.mean(axis=(0, 1, 2, 3))).max() < 1e-6
        np.testing.assert_allclose(y.var(axis=(0, 1, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_momentum_update(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 2, 2, 2))
        gamma, beta, rm, rv = _bn_params(2)
        T.batchnorm3d(Tensor(x, dtype=np.float64), gamma, beta, rm, rv, "train")
        np.testing.assert_allclose(rm.data, 0.1 * x.mean(axis=(0, 1, 2, 3)), rtol=1e-10)
        np.testing.assert_allclose(rv.data, 0.9 + 0.1 * x.var(axis=(0, 1, 2, 3)), rtol=1e-10)

    def test_eval_uses_running_stats(self):
        gamma, beta, _, _ = _bn_params(1)
        rm = Tensor(np.array([2.0]))
        rv = Tensor(np.array([4.0]))
        x = Tensor(np.full((1, 1, 1, 1, 1), 4.0), dtype=np.float64)
        y = T.batchnorm3d(x, gamma, beta, rm, rv, "eval")
        np.testing.assert_allclose(y.data, (4.0 - 2.0) / np.sqrt(4.0 + T.BN_EPS), rtol=1e-10)

    def test_constant_channel_no_failure(self):
        # variance zero handled by epsilon
        gamma, beta, rm, rv = _bn_params(1)
        x = Tensor(np.full((1, 2, 2, 2, 1), 5.0), dtype=np.float64)
        y = T.batchnorm3d(x, gamma, beta, rm, rv, "train")
        assert np.isfinite(y.data).all()


# ---------------------------------------------------------------------------
# Backward machinery
# ---------------------------------------------------------------------------


class TestBackward:
    def test_sum_grad_all_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4, 5)), requires_grad=True)
        with Tape() as tape:
            T.backward(T.sum_(x))
        tape.clear()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 5), dtype=np.float32))

    def test_sum_of_squares_hand_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            T.backward(T.sum_(T.mul(x, x)))
        tape.clear()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_rejects_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = T.mul(x, 2.0)
            with pytest.raises(ShapeError):
                T.backward(y)

    def test_rejects_tapeless_loss(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.sum_(x)  # no active tape
        with pytest.raises(ShapeError):
            T.backward(y)

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(x)
            T.backward(loss)
            T.backward(loss)
        tape.clear()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with T.no_grad():
                y = T.sum_(x)
        assert len(tape) == 0 and not y.requires_grad

    def test_broadcast_add_unbroadcasts_gradient(self):
        a = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            T.backward(T.sum_(T.add(a, b)))
        tape.clear()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_permute_and_bmm_roundtrip_grad(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True, dtype=np.float64)
        proj = rng.standard_normal((2, 3, 5))
        with Tape() as tape:
            T.backward(T.sum_(T.mul(T.bmm(a, b), Tensor(proj))))
        tape.clear()
        np.testing.assert_allclose(a.grad, proj @ b.data.transpose(0, 2, 1), rtol=1e-10)
        np.testing.assert_allclose(b.grad, a.data.transpose(0, 2, 1) @ proj, rtol=1e-10)
