"""Reverse-mode engine: op semantics, gradients, optimizer, checkpoints."""

import numpy as np
import pytest

from partfactor import autodiff as ad
from partfactor.gradcheck import run_suite
from partfactor.sampling import affine_sample


class TestBasics:
    def test_relu_gates_gradient(self):
        x = ad.DiffValue(np.array([-2.0, 3.0]))
        ad.backward(ad.vsum(ad.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0]

    def test_bce_gradient_vanishes_at_target_through_logit(self):
        # chain rule at the optimum: dL/dlogit = sigmoid(z) - t = 0
        z = ad.DiffValue(np.array([0.3, -1.2, 2.0]))
        p = ad.sigmoid(z)
        ad.backward(ad.bce(p, p.data.copy()))
        assert np.allclose(z.grad, 0.0, atol=1e-12)

    def test_bce_logit_gradient_is_p_minus_t(self):
        z = ad.DiffValue(np.array([0.5, -0.5]))
        t = np.array([1.0, 0.0])
        p = ad.sigmoid(z)
        ad.backward(ad.bce(p, t))
        assert np.allclose(z.grad, p.data - t, atol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ad.DiffError):
            ad.add(ad.DiffValue(np.zeros(2)), ad.DiffValue(np.zeros(3)))
        with pytest.raises(ad.DiffError):
            ad.backward(ad.DiffValue(np.zeros(3)))

    def test_nan_reports_originating_op(self):
        x = ad.DiffValue(np.array([800.0]))
        with pytest.raises(ad.DiffError, match="exp_overflow"):
            ad.DiffValue(np.exp(x.data), (x,), None, "exp_overflow")

    def test_fanout_accumulates(self):
        x = ad.DiffValue(np.array([1.5]))
        y = ad.add(x, x)
        ad.backward(ad.vsum(y))
        assert x.grad.tolist() == [2.0]

    def test_shared_subexpression_equals_unrolled_tree(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(6)

        x = ad.DiffValue(a)
        shared = ad.relu(x)
        out = ad.add(ad.scale(shared, 2.0), ad.scale(shared, 3.0))
        ad.backward(ad.vsum(out))
        g_shared = x.grad.copy()

        x2 = ad.DiffValue(a)
        out2 = ad.add(ad.scale(ad.relu(x2), 2.0), ad.scale(ad.relu(x2), 3.0))
        ad.backward(ad.vsum(out2))
        assert np.array_equal(g_shared, x2.grad)

    def test_sum_of_losses_gradient_is_sum_of_gradients(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal(5)
        t1, t2 = rng.standard_normal(5), rng.standard_normal(5)

        x = ad.DiffValue(a)
        ad.backward(ad.add(ad.l2(x, t1), ad.l2(x, t2)))
        combined = x.grad.copy()

        g_parts = np.zeros_like(a)
        for t in (t1, t2):
            x = ad.DiffValue(a)
            ad.backward(ad.l2(x, t))
            g_parts += x.grad
        assert np.allclose(combined, g_parts, atol=1e-12)

    def test_detach_blocks_gradient(self):
        x = ad.DiffValue(np.ones(3))
        y = ad.scale(x, 2.0).detach()
        ad.backward(ad.vsum(ad.scale(y, 5.0)))
        assert x.grad is None


class TestGradSuite:
    def test_all_ops_match_finite_differences(self):
        ok, results = run_suite(seed=123, instances=5)
        failing = [r for r in results if r[1] > r[2]]
        assert ok, f"ops over tolerance: {failing}"


class TestGridSample:
    def test_identity_is_exact(self):
        rng = np.random.default_rng(0)
        vol = rng.random((10, 10, 10))
        theta = ad.DiffValue(np.array([1.0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]))
        out = ad.grid_sample3(ad.DiffValue(vol), theta)
        assert np.array_equal(out.data, vol)

    def test_integer_translation_is_exact(self):
        rng = np.random.default_rng(1)
        r = 8
        vol = rng.random((r, r, r))
        theta = np.array([1.0, 0, 0, 0, 1, 0, 0, 0, 1, 2.0 / r, 0, 0])
        out = ad.grid_sample3(ad.DiffValue(vol), ad.DiffValue(theta))
        assert np.array_equal(out.data[:-1], vol[1:])
        assert np.all(out.data[-1] == 0.0)

    def test_linear_in_volume(self):
        rng = np.random.default_rng(2)
        r = 6
        v1, v2 = rng.random((r, r, r)), rng.random((r, r, r))
        theta = np.concatenate([np.eye(3).ravel() * 1.1, [0.05, -0.1, 0.02]])
        a, b = 0.7, -1.3
        lhs = affine_sample(a * v1 + b * v2, theta[:9].reshape(3, 3), theta[9:])
        rhs = a * affine_sample(v1, theta[:9].reshape(3, 3), theta[9:]) + b * affine_sample(
            v2, theta[:9].reshape(3, 3), theta[9:]
        )
        assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ad.DiffError):
            ad.grid_sample3(ad.DiffValue(np.zeros((2, 3, 2))), ad.DiffValue(np.zeros(12)))


def adam_oracle(grads, lr=1e-3):
    """Scalar-loop reference for the Adam update."""
    m = v = 0.0
    x = 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        x -= lr * mhat / (np.sqrt(vhat) + 1e-8)
    return x


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = ad.DiffValue(np.array([1.0, -2.0]))
        state = ad.AdamState({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        ad.adam_step({"p": p}, state)
        assert np.array_equal(p.data, [1.0, -2.0])
        assert state.step_count == 1

    def test_constant_gradient_matches_scalar_oracle(self):
        p = ad.DiffValue(np.array([0.0]))
        state = ad.AdamState({"p": p}, lr=1e-3, decay_every=10**9)
        g = 0.37
        for _ in range(50):
            p.grad = np.array([g])
            ad.adam_step({"p": p}, state)
        assert p.data[0] == pytest.approx(adam_oracle([g] * 50), abs=1e-15)
        # steady-state step magnitude approaches lr * sign(g)
        before = p.data[0]
        p.grad = np.array([g])
        ad.adam_step({"p": p}, state)
        assert abs(p.data[0] - before) == pytest.approx(1e-3, rel=0.05)

    def test_lr_decay_schedule(self):
        state = ad.AdamState({}, lr=1e-4, decay_rate=0.8, decay_every=40)
        assert state.effective_lr(0) == 1e-4
        assert state.effective_lr(39) == 1e-4
        assert state.effective_lr(40) == pytest.approx(8e-5)
        assert state.effective_lr(80) == pytest.approx(6.4e-5)

    def test_group_lr_scales(self):
        a = ad.DiffValue(np.array([0.0]))
        b = ad.DiffValue(np.array([0.0]))
        state = ad.AdamState({"proj.P0": a, "enc.W": b}, lr=1e-3, lr_scales={"proj.": 0.1})
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        ad.adam_step({}, state)
        assert abs(a.data[0]) == pytest.approx(0.1 * abs(b.data[0]))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        params = {
            "encoder.c0.W": rng.standard_normal((4, 1, 2, 2, 2)),
            "proj.P0": rng.standard_normal((5, 5)),
            "scalar": np.array(3.25),
        }
        path = tmp_path / "ck.pfck"
        ad.save_checkpoint(params, path)
        blob = path.read_bytes()
        assert blob.startswith(b"PFCK1\n")
        back = ad.load_checkpoint(path)
        assert set(back) == set(params)
        for k in params:
            assert np.array_equal(back[k], params[k])
        ad.save_checkpoint(back, tmp_path / "ck2.pfck")
        assert (tmp_path / "ck2.pfck").read_bytes() == blob

    def test_truncated_raises_with_offset(self, tmp_path):
        path = tmp_path / "ck.pfck"
        ad.save_checkpoint({"a": np.ones(4)}, path)
        bad = path.read_bytes()[:-8]
        (tmp_path / "bad.pfck").write_bytes(bad)
        with pytest.raises(ad.CheckpointError, match="byte offset"):
            ad.load_checkpoint(tmp_path / "bad.pfck")
