"""Autodiff engine: gradient correctness, stability, optimizer, checkpoints."""

import io

import numpy as np
import pytest

from conftest import finite_difference_check
from seqdec import nn
from seqdec.core import RngStream


class TestElementwiseOps:
    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = nn.matmul(nn.Tensor(a), nn.Tensor(b)).data
        naive = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    naive[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(out, naive, atol=1e-12)

    def test_identity_product(self):
        x = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(nn.matmul(nn.Tensor(x), nn.Tensor(np.eye(3))).data, x)

    def test_zero_annihilation(self):
        x = np.random.default_rng(1).normal(size=(3, 3))
        out = nn.mul(nn.Tensor(x), nn.Tensor(np.zeros((3, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))

    def test_gelu_fixed_points(self):
        assert nn.gelu(nn.Tensor(np.array([0.0]))).data[0] == 0.0
        big = nn.gelu(nn.Tensor(np.array([12.0]))).data[0]
        assert abs(big - 12.0) < 1e-6

    def test_softmax_uniform_and_stability(self):
        row = nn.softmax_rows(nn.Tensor(np.array([[0.0, 0.0]]))).data
        np.testing.assert_allclose(row, [[0.5, 0.5]])
        hot = nn.softmax_rows(nn.Tensor(np.array([[1000.0, 0.0]]))).data
        np.testing.assert_allclose(hot, [[1.0, 0.0]], atol=1e-300)
        assert np.all(np.isfinite(hot))

    def test_causal_mask_semantics(self):
        scores = nn.Tensor(np.random.default_rng(2).normal(size=(3, 3)))
        probs = nn.softmax_rows(scores, causal_mask=True).data
        assert probs[0, 0] == 1.0 and probs[0, 1] == 0.0 and probs[0, 2] == 0.0
        iu = np.triu_indices(3, 1)
        assert np.all(probs[iu] == 0.0)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_layer_norm_constant_row(self):
        x = nn.Tensor(np.full((2, 6), 3.7))
        out = nn.layer_norm(x, nn.Tensor(np.ones(6)), nn.Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_layer_norm_unit_variance(self):
        x = nn.Tensor(np.random.default_rng(3).normal(size=(4, 64)))
        out = nn.layer_norm(x, nn.Tensor(np.ones(64)), nn.Tensor(np.zeros(64))).data
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_dropout_identity_cases(self):
        x = nn.Tensor(np.random.default_rng(4).normal(size=(8, 8)))
        np.testing.assert_array_equal(nn.dropout(x, 0.0, True, RngStream(0, 0)).data, x.data)
        np.testing.assert_array_equal(nn.dropout(x, 0.5, False).data, x.data)

    def test_dropout_keep_rate(self):
        x = nn.Tensor(np.ones((1000, 1000)))
        kept = nn.dropout(x, 0.3, True, RngStream(5, 5)).data
        keep_rate = np.mean(kept > 0)
        assert abs(keep_rate - 0.7) < 3 * np.sqrt(0.3 * 0.7 / kept.size) + 1e-3
        np.testing.assert_allclose(kept[kept > 0], 1.0 / 0.7)


class TestGradients:
    """Central finite differences within max(1e-6 abs, 1e-3 rel)."""

    def test_every_op_on_twenty_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 3))
            w = rng.normal(size=(3, 3))
            vec = rng.normal(size=4)
            probe = nn.Tensor(rng.normal(size=(3, 3)))
            probe2 = nn.Tensor(rng.normal(size=(3, 4)))

            finite_difference_check(
                lambda x, y: nn.sum_(nn.mul(nn.matmul(x, y), probe)), [a, b])
            finite_difference_check(
                lambda x, y: nn.sum_(nn.mul(nn.add(x, y), probe2)), [a, a * 0.5])
            finite_difference_check(
                lambda x, y: nn.sum_(nn.mul(nn.sub(x, y), probe2)), [a, a * 2.0])
            finite_difference_check(lambda x: nn.sum_(nn.scale(x, -1.7)), [a])
            finite_difference_check(
                lambda x: nn.sum_(nn.mul(nn.transpose(x), nn.Tensor(b))), [a])
            probe_wide = nn.Tensor(rng.normal(size=(3, 8)))
            finite_difference_check(
                lambda x, y: nn.sum_(nn.mul(nn.concat([x, y], axis=1), probe_wide)),
                [a, a + 1.0])
            probe_small = nn.Tensor(rng.normal(size=(2, 2)))
            finite_difference_check(
                lambda x: nn.sum_(nn.mul(x[1:, :2], probe_small)), [a])
            finite_difference_check(lambda x: nn.sum_(nn.gelu(x)), [a])
            finite_difference_check(lambda x: nn.sum_(nn.tanh(x)), [a])
            finite_difference_check(lambda x: nn.sum_(nn.abs_(x)), [a + 3.0])
            finite_difference_check(lambda x: nn.sum_(nn.log(x)), [np.abs(a) + 1.0])
            finite_difference_check(lambda x: nn.mean_(nn.mul(x, x)), [a])
            finite_difference_check(
                lambda x: nn.sum_(nn.mul(nn.softmax_rows(x), probe2)), [a])
            finite_difference_check(
                lambda x: nn.sum_(nn.mul(nn.softmax_rows(x, causal_mask=True), probe)),
                [rng.normal(size=(3, 3))])
            finite_difference_check(
                lambda x, g, bb: nn.sum_(nn.mul(nn.layer_norm(x, g, bb), probe2)),
                [a, rng.normal(size=4), rng.normal(size=4)])
            targets = rng.integers(0, 3, size=3)
            finite_difference_check(
                lambda x: nn.sum_(nn.cross_entropy_logits(x, targets)),
                [rng.normal(size=(3, 3))])
            finite_difference_check(
                lambda x: nn.sum_(nn.dropout(x, 0.4, True, RngStream(seed, 77))), [a])

    def test_quadratic_form_analytic(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(4, 4))
        x = rng.normal(size=4)
        xt = nn.Tensor(x, requires_grad=True)
        wx = nn.matmul(nn.Tensor(w), xt)
        loss = nn.sum_(nn.mul(wx, wx))
        nn.backward(loss)
        np.testing.assert_allclose(xt.grad, 2.0 * w.T @ (w @ x), atol=1e-10)

    def test_sum_grad_is_ones(self):
        x = nn.Tensor(np.random.default_rng(7).normal(size=(5, 3)), requires_grad=True)
        nn.backward(nn.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((5, 3)))

    def test_repeated_backward_accumulates(self):
        x = nn.Tensor(np.array([3.0]), requires_grad=True)
        loss = nn.mul(x, x)
        nn.backward(loss)
        first = x.grad.copy()
        loss2 = nn.mul(x, x)
        nn.backward(loss2)
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_non_scalar_loss_rejected(self):
        x = nn.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(nn.InvalidLossError):
            nn.backward(nn.scale(x, 2.0))


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = nn.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        nn.adamw_step([p], nn.OptimState(lr=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_decay_only_shrinks_by_expected_factor(self):
        p = nn.Tensor(np.array([4.0]), requires_grad=True)
        p.grad = np.zeros(1)
        nn.adamw_step([p], nn.OptimState(lr=0.01, weight_decay=0.2))
        np.testing.assert_allclose(p.data, 4.0 * (1.0 - 0.01 * 0.2))

    def test_single_step_scalar_recurrence(self):
        lr, g = 2e-3, -0.7
        p = nn.Tensor(np.array([0.5]), requires_grad=True)
        p.grad = np.array([g])
        nn.adamw_step([p], nn.OptimState(lr=lr, weight_decay=0.0))
        m_hat = (0.1 * g) / 0.1
        v_hat = (0.001 * g * g) / 0.001
        expected = 0.5 - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.data, expected, atol=1e-15)

    def test_two_steps_track_reference_loop(self):
        lr, wd = 1e-2, 1e-3
        p = nn.Tensor(np.array([1.0]), requires_grad=True)
        opt = nn.OptimState(lr=lr, weight_decay=wd)
        ref, m, v = 1.0, 0.0, 0.0
        for step in (1, 2):
            g = 0.3 * step
            p.grad = np.array([g])
            nn.adamw_step([p], opt)
            ref *= (1 - lr * wd)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= lr * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, atol=1e-14)


class TestCheckpointFormat:
    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(8)
        arrays = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=7)}
        buf = io.BytesIO()
        nn.save_checkpoint(arrays, buf, extra={"note": 1})
        buf.seek(0)
        back, extra = nn.load_checkpoint(buf)
        assert extra == {"note": 1}
        for name in arrays:
            np.testing.assert_array_equal(back[name], arrays[name])

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        nn.save_checkpoint({"w": np.ones((4, 4))}, buf)
        raw = buf.getvalue()[:-8]
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(io.BytesIO(raw))


class TestDeterminism:
    def test_identical_seeds_identical_losses(self):
        def run():
            rng = RngStream(11, 12)
            x = nn.Tensor(rng.generator.normal(size=(6, 6)), requires_grad=True)
            h = nn.dropout(nn.gelu(nn.matmul(x, x)), 0.2, True, rng.child(1))
            loss = nn.mean_(nn.mul(h, h))
            nn.backward(loss)
            return float(loss.data), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)
