import math

import numpy as np
import pytest

from setner import autodiff as ad
from conftest import finite_diff, rel_err

RNG = np.random.default_rng(20240811)


def leaf(arr):
    return ad.tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def check_op(build, arrays, tol=1e-4, step=1e-5):
    """Compare analytic grads of sum(build(tensors)) with central differences."""
    tensors = [leaf(a) for a in arrays]
    out = ad.sum_all(build(*tensors))
    out.backward()
    analytic = [t.grad.copy() for t in tensors]

    def value():
        ts = [ad.tensor(a) for a in arrays]
        return ad.sum_all(build(*ts)).item()

    numeric = finite_diff(value, arrays, step=step)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < tol


class TestMatmul:
    def test_identity(self):
        a = ad.tensor(np.eye(2))
        b = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_projector(self):
        p = ad.tensor([[1.0, 0.0], [0.0, 0.0]])
        x = ad.tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(ad.matmul(p, x).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self):
        a = RNG.standard_normal((3, 4))
        b = RNG.standard_normal((4, 2))
        check_op(ad.matmul, [a, b], tol=1e-6)

    def test_gradient_rule(self):
        a = leaf(RNG.standard_normal((3, 4)))
        b = leaf(RNG.standard_normal((4, 2)))
        out = ad.matmul(a, b)
        g = RNG.standard_normal((3, 2))
        loss = ad.sum_all(ad.mul(out, ad.tensor(g)))
        loss.backward()
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(ad.tensor([[0.0, 0.0, 0.0]]), axis=1)
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_stability_under_shift(self):
        out = ad.softmax(ad.tensor([[1000.0, 1000.0]]), axis=1)
        assert np.allclose(out.data, 0.5)
        assert np.all(np.isfinite(out.data))

    def test_matches_high_precision_reference(self):
        import mpmath

        x = RNG.standard_normal(5)
        out = ad.softmax(ad.tensor(x.reshape(1, -1)), axis=1).data[0]
        with mpmath.workdps(60):
            es = [mpmath.exp(v) for v in x]
            total = mpmath.fsum(es)
            ref = np.array([float(e / total) for e in es])
        assert np.max(np.abs(out - ref)) < 1e-12

    def test_rows_sum_to_one_and_positive(self):
        for _ in range(20):
            x = RNG.standard_normal((4, 7)) * 10
            out = ad.softmax(ad.tensor(x), axis=1).data
            assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(out > 0)

    def test_axis0(self):
        x = RNG.standard_normal((4, 3))
        out = ad.softmax(ad.tensor(x), axis=0).data
        assert np.allclose(out.sum(axis=0), 1.0, atol=1e-9)

    def test_gradient(self):
        # Weight the outputs: sum of a softmax row is constant, so the
        # unweighted gradient would be identically zero.
        x = RNG.standard_normal((3, 5))
        w = ad.tensor(RNG.standard_normal((3, 5)))
        check_op(lambda t: ad.mul(ad.softmax(t, axis=1), w), [x])


class TestConcat:
    def test_axis1(self):
        out = ad.concat([ad.tensor([[1.0]]), ad.tensor([[2.0]])], axis=1)
        assert np.array_equal(out.data, [[1.0, 2.0]])

    def test_empty_tensor_identity(self):
        x = RNG.standard_normal((2, 3))
        empty = ad.tensor(np.zeros((2, 0)))
        out = ad.concat([ad.tensor(x), empty], axis=1)
        assert np.array_equal(out.data, x)

    def test_gradient_is_split(self):
        a = leaf(RNG.standard_normal((2, 3)))
        b = leaf(RNG.standard_normal((2, 2)))
        ad.sum_all(ad.concat([a, b], axis=1)).backward()
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, np.ones((2, 2)))

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.concat([ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((3, 3)))], axis=1)


class TestElementwise:
    def test_relu_values(self):
        out = ad.relu(ad.tensor([[-3.0, 3.0]]))
        assert np.array_equal(out.data, [[0.0, 3.0]])

    def test_dropout_eval_mode_is_identity(self):
        x = ad.tensor(RNG.standard_normal((4, 4)))
        out = ad.dropout(x, 0.1, training=False, rng=np.random.default_rng(0))
        assert out is x

    def test_dropout_training_rescales(self):
        rng = np.random.default_rng(3)
        x = ad.tensor(np.ones((200, 200)))
        out = ad.dropout(x, 0.25, training=True, rng=rng)
        kept = out.data != 0
        assert abs(kept.mean() - 0.75) < 0.02
        assert np.allclose(out.data[kept], 1.0 / 0.75)

    def test_sigmoid_gradient_at_zero(self):
        x = leaf([[0.0]])
        ad.sum_all(ad.sigmoid(x)).backward()
        assert abs(x.grad[0, 0] - 0.25) < 1e-12
        check_op(ad.sigmoid, [np.zeros((1, 1))])

    def test_log_domain_error(self):
        with pytest.raises(ad.DomainError):
            ad.log(ad.tensor([[0.0]]))

    @pytest.mark.parametrize(
        "op",
        [ad.relu, ad.tanh, ad.sigmoid, ad.neg, lambda t: ad.scale(t, 1.7),
         lambda t: ad.addc(t, 0.3)],
    )
    def test_unary_gradients(self, op):
        x = RNG.standard_normal((3, 4)) + 0.05
        check_op(op, [x])

    def test_log_gradient(self):
        x = RNG.random((3, 4)) + 0.5
        check_op(ad.log, [x])

    def test_binary_gradients(self):
        a = RNG.standard_normal((3, 4))
        b = RNG.standard_normal((3, 4))
        check_op(ad.add, [a, b])
        check_op(ad.mul, [a, b])

    def test_add_bias_gradient(self):
        x = RNG.standard_normal((5, 4))
        b = RNG.standard_normal((1, 4))
        check_op(ad.add_bias, [x, b])

    def test_dropout_gradient_with_fixed_mask(self):
        x = leaf(RNG.standard_normal((6, 6)))
        out = ad.dropout(x, 0.5, training=True, rng=np.random.default_rng(11))
        mask = (out.data != 0).astype(float)
        ad.sum_all(out).backward()
        assert np.allclose(x.grad, mask / 0.5)


class TestStructureOps:
    def test_gather_rows_gradient_accumulates_repeats(self):
        w = leaf(RNG.standard_normal((5, 3)))
        out = ad.gather_rows(w, [0, 2, 0])
        ad.sum_all(out).backward()
        expected = np.zeros((5, 3))
        expected[0] = 2.0
        expected[2] = 1.0
        assert np.array_equal(w.grad, expected)

    def test_gather_rows_out_of_range(self):
        with pytest.raises(ad.DomainError):
            ad.gather_rows(ad.tensor(np.ones((2, 2))), [5])

    def test_gather_items(self):
        x = leaf(np.arange(12, dtype=np.float64).reshape(3, 4))
        out = ad.gather_items(x, [0, 2, 2], [1, 3, 3])
        assert np.array_equal(out.data[:, 0], [1.0, 11.0, 11.0])
        ad.sum_all(out).backward()
        assert x.grad[2, 3] == 2.0 and x.grad[0, 1] == 1.0

    def test_slices_and_reshape_gradients(self):
        x = RNG.standard_normal((4, 6))
        check_op(lambda t: ad.slice_rows(t, 1, 3), [x])
        check_op(lambda t: ad.slice_cols(t, 2, 5), [x])
        check_op(lambda t: ad.reshape(t, (2, 12)), [x])
        check_op(ad.transpose, [x])

    def test_masked_softmax_zeroes_invalid(self):
        x = ad.tensor(RNG.standard_normal((3, 5)))
        mask = np.array([[1, 1, 0, 1, 0]] * 3, dtype=bool)
        out = ad.masked_softmax(x, mask)
        assert np.all(out.data[:, [2, 4]] == 0.0)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-9)

    def test_masked_softmax_all_masked_row(self):
        x = ad.tensor(np.zeros((2, 3)))
        mask = np.array([[1, 1, 1], [0, 0, 0]], dtype=bool)
        with pytest.raises(ad.GraphError):
            ad.masked_softmax(x, mask)

    def test_masked_softmax_gradient(self):
        x = RNG.standard_normal((3, 5))
        w = ad.tensor(RNG.standard_normal((3, 5)))
        mask = np.array([[1, 1, 0, 1, 0], [1, 0, 1, 1, 1], [0, 1, 1, 0, 1]], bool)
        check_op(lambda t: ad.mul(ad.masked_softmax(t, mask), w), [x])

    def test_layer_norm_gradient(self):
        x = RNG.standard_normal((4, 6))
        gain = RNG.standard_normal((1, 6))
        bias = RNG.standard_normal((1, 6))
        check_op(ad.layer_norm, [x, gain, bias])


class TestAttention:
    def test_single_key_returns_value(self):
        q = ad.tensor(RNG.standard_normal((3, 4)))
        kv = ad.tensor(RNG.standard_normal((1, 4)))
        out = ad.attention(q, kv, kv)
        assert np.allclose(out.data, np.repeat(kv.data, 3, axis=0))

    def test_orthogonal_queries_give_uniform_average(self):
        q = ad.tensor(np.zeros((2, 4)))
        k = ad.tensor(RNG.standard_normal((5, 4)))
        v = ad.tensor(RNG.standard_normal((5, 4)))
        out = ad.attention(q, k, v)
        assert np.allclose(out.data, np.repeat(v.data.mean(axis=0, keepdims=True), 2, axis=0))

    def test_matches_high_precision_reference(self):
        import mpmath

        q = RNG.standard_normal((3, 4))
        k = RNG.standard_normal((3, 4))
        v = RNG.standard_normal((3, 4))
        out = ad.attention(ad.tensor(q), ad.tensor(k), ad.tensor(v)).data
        with mpmath.workdps(60):
            ref = np.zeros((3, 4))
            for i in range(3):
                logits = [
                    mpmath.fsum(mpmath.mpf(q[i, d]) * mpmath.mpf(k[j, d]) for d in range(4))
                    / mpmath.sqrt(4)
                    for j in range(3)
                ]
                es = [mpmath.exp(x) for x in logits]
                z = mpmath.fsum(es)
                for d in range(4):
                    ref[i, d] = float(
                        mpmath.fsum(es[j] * mpmath.mpf(v[j, d]) for j in range(3)) / z
                    )
        assert np.max(np.abs(out - ref)) < 1e-10

    def test_attention_gradient(self):
        q = RNG.standard_normal((2, 4))
        k = RNG.standard_normal((3, 4))
        v = RNG.standard_normal((3, 4))
        check_op(ad.attention, [q, k, v])

    def test_mha_core_matches_per_head_attention(self):
        d, h, b, nq, nk = 8, 2, 2, 3, 4
        qp = RNG.standard_normal((b * nq, d))
        kp = RNG.standard_normal((b * nk, d))
        vp = RNG.standard_normal((b * nk, d))
        mask = np.ones((b, nk), dtype=bool)
        mask[1, 3] = False
        out = ad.mha_core(
            ad.tensor(qp), ad.tensor(kp), ad.tensor(vp), h, b, key_mask=mask
        ).data
        dk = d // h
        for s in range(b):
            for head in range(h):
                cols = slice(head * dk, (head + 1) * dk)
                q = ad.tensor(qp[s * nq : (s + 1) * nq, cols])
                k = ad.tensor(kp[s * nk : (s + 1) * nk, cols])
                v = ad.tensor(vp[s * nk : (s + 1) * nk, cols])
                ref = ad.attention(q, k, v, mask=mask[s]).data
                assert np.allclose(out[s * nq : (s + 1) * nq, cols], ref, atol=1e-12)

    def test_mha_core_gradient(self):
        d, h, b, nq, nk = 8, 2, 2, 2, 3
        qp = RNG.standard_normal((b * nq, d))
        kp = RNG.standard_normal((nk * b, d))
        vp = RNG.standard_normal((nk * b, d))
        mask = np.ones((b, nk), dtype=bool)
        mask[0, 2] = False
        check_op(
            lambda q, k, v: ad.mha_core(
                q, k, v, h, b, key_mask=mask, keys_time_major=True
            ),
            [qp, kp, vp],
        )

    def test_mha_core_no_valid_keys(self):
        qp = ad.tensor(np.zeros((2, 4)))
        kp = ad.tensor(np.zeros((2, 4)))
        mask = np.array([[True, True], [False, False]])[:, :1]
        with pytest.raises(ad.GraphError):
            ad.mha_core(qp, kp, kp, 2, 2, key_mask=mask)


class TestStructuredRowOps:
    def test_repeat_each_row_values_and_gradient(self):
        x = RNG.standard_normal((3, 2))
        out = ad.repeat_each_row(ad.tensor(x), 2)
        assert np.array_equal(out.data, np.repeat(x, 2, axis=0))
        check_op(lambda t: ad.repeat_each_row(t, 3), [x])

    def test_tile_rows_values_and_gradient(self):
        x = RNG.standard_normal((3, 2))
        out = ad.tile_rows(ad.tensor(x), 2)
        assert np.array_equal(out.data, np.tile(x, (2, 1)))
        check_op(lambda t: ad.tile_rows(t, 4), [x])

    def test_repeat_blocks_values_and_gradient(self):
        x = RNG.standard_normal((4, 3))  # two blocks of two rows
        out = ad.repeat_blocks(ad.tensor(x), 2, 3)
        expected = np.concatenate([np.tile(x[:2], (3, 1)), np.tile(x[2:], (3, 1))])
        assert np.array_equal(out.data, expected)
        check_op(lambda t: ad.repeat_blocks(t, 2, 3), [x])

    def test_permute_rows_round_trip_and_gradient(self):
        x = RNG.standard_normal((5, 3))
        perm = np.array([3, 0, 4, 1, 2])
        out = ad.permute_rows(ad.tensor(x), perm)
        assert np.array_equal(out.data, x[perm])
        check_op(lambda t: ad.permute_rows(t, perm), [x])

    def test_permute_rows_rejects_non_bijection(self):
        with pytest.raises(ad.ShapeError):
            ad.permute_rows(ad.tensor(np.ones((3, 1))), [0, 0, 2])


class TestFusedLstmCell:
    def _params(self, rng, input_dim=3, hidden=4):
        w = rng.standard_normal((input_dim, 4 * hidden)) * 0.4
        u = rng.standard_normal((hidden, 4 * hidden)) * 0.4
        b = rng.standard_normal((1, 4 * hidden)) * 0.1
        return w, u, b

    def test_matches_unfused_reference(self):
        rng = np.random.default_rng(0)
        w, u, b = self._params(rng)
        x = rng.standard_normal((2, 3))
        h = rng.standard_normal((2, 4)) * 0.5
        c = rng.standard_normal((2, 4)) * 0.5
        out = ad.lstm_cell_core(
            ad.tensor(x), ad.tensor(h), ad.tensor(c),
            ad.tensor(w), ad.tensor(u), ad.tensor(b),
        )
        gates = x @ w + h @ u + b
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        i, f, g, o = sig(gates[:, :4]), sig(gates[:, 4:8]), np.tanh(gates[:, 8:12]), sig(gates[:, 12:])
        c_ref = f * c + i * g
        h_ref = o * np.tanh(c_ref)
        assert np.allclose(out.data[:2], h_ref, atol=1e-12)
        assert np.allclose(out.data[2:], c_ref, atol=1e-12)

    def test_gradient_all_inputs(self):
        rng = np.random.default_rng(1)
        w, u, b = self._params(rng)
        x = rng.standard_normal((2, 3))
        h = rng.standard_normal((2, 4)) * 0.5
        c = rng.standard_normal((2, 4)) * 0.5
        probe = rng.standard_normal((4, 4))
        check_op(
            lambda tx, th, tc, tw, tu, tb: ad.mul(
                ad.lstm_cell_core(tx, th, tc, tw, tu, tb), ad.tensor(probe)
            ),
            [x, h, c, w, u, b],
        )


class TestBackwardContract:
    def test_sum_gives_ones(self):
        x = leaf(RNG.standard_normal((3, 5)))
        ad.sum_all(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 5)))

    def test_square_at_three(self):
        x = leaf([[3.0]])
        ad.sum_all(ad.mul(x, x)).backward()
        assert x.grad[0, 0] == 6.0

    def test_non_scalar_loss_rejected(self):
        x = leaf(RNG.standard_normal((2, 2)))
        with pytest.raises(ad.GraphError):
            ad.mul(x, x).backward()

    def test_accumulation_without_zeroing(self):
        x = leaf(RNG.standard_normal((2, 2)))
        loss = ad.sum_all(ad.mul(x, x))
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        assert np.array_equal(x.grad, 2.0 * first)

    def test_bitwise_determinism_after_zeroing(self):
        x = leaf(RNG.standard_normal((4, 4)))
        w = leaf(RNG.standard_normal((4, 4)))
        loss = ad.sum_all(ad.tanh(ad.matmul(x, w)))
        loss.backward()
        g1 = (x.grad.copy(), w.grad.copy())
        x.zero_grad()
        w.zero_grad()
        loss.backward()
        assert np.array_equal(g1[0], x.grad) and np.array_equal(g1[1], w.grad)

    def test_no_grad_skips_graph(self):
        x = leaf(RNG.standard_normal((2, 2)))
        with ad.no_grad():
            out = ad.mul(x, x)
        assert not out.requires_grad and out._backward is None

    def test_fifty_random_composites(self):
        for trial in range(50):
            rng = np.random.default_rng(trial)
            a = rng.standard_normal((2, 3))
            b = rng.standard_normal((3, 2))
            c = rng.standard_normal((2, 2))

            def build(ta, tb, tc):
                h = ad.tanh(ad.matmul(ta, tb))
                h = ad.add(h, tc)
                h = ad.softmax(ad.sigmoid(h), axis=1)
                return ad.mul(h, tc)

            check_op(build, [a, b, c])
