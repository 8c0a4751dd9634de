"""Layer-level oracles: hand-computed cases plus finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturefuse.nn import (
    AttentionPool,
    BatchNorm1d,
    Conv1d,
    GRULayer,
    Linear,
    ParamStore,
    adam_step,
    attention_forward,
    cross_entropy,
    grad_check,
    relu,
    softmax,
)


def test_relu():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(4)), [0.25] * 4, atol=1e-15)

    def test_extreme_logits_stay_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.uniform(-1e4, 1e4, size=8)
            p = softmax(x)
            assert np.all(p >= 0)
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all(np.isfinite(p))


class TestCrossEntropy:
    def test_certain_prediction_is_zero_loss(self):
        logits = np.array([[1e3, 0.0, 0.0]])
        loss, _ = cross_entropy(logits, np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        # two-class logits [2, 0], target 0: loss = ln(1 + e^-2)
        loss, _ = cross_entropy(np.array([[2.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(np.log(1 + np.exp(-2.0)), rel=1e-12)
        assert loss == pytest.approx(0.1269, abs=1e-4)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))


class TestConv1d:
    def test_identity_kernel(self):
        store = ParamStore()
        conv = Conv1d(store, "c", 1, 1, kernel=1, stride=1, rng=np.random.default_rng(0))
        conv.w.value[...] = 1.0
        conv.b.value[...] = 0.0
        x = np.arange(6, dtype=float).reshape(1, 6, 1)
        out, _ = conv.forward(x)
        np.testing.assert_allclose(out, x)

    def test_hand_convolution(self):
        # x=[1,2,3,4], kernel [1,1], stride 2 -> [1+2, 3+4] = [3, 7]
        store = ParamStore()
        conv = Conv1d(store, "c", 1, 1, kernel=2, stride=2, rng=np.random.default_rng(0))
        conv.w.value[...] = 1.0
        conv.b.value[...] = 0.0
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1)
        out, _ = conv.forward(x)
        np.testing.assert_allclose(out.ravel(), [3.0, 7.0])

    def test_shape_formula_example(self):
        store = ParamStore()
        conv = Conv1d(store, "c", 2, 3, kernel=3, stride=2, rng=np.random.default_rng(0))
        out, _ = conv.forward(np.zeros((1, 5, 2)))
        assert out.shape == (1, 2, 3)

    @given(
        t=st.integers(1, 60),
        k=st.integers(1, 12),
        stride=st.integers(1, 5),
    )
    @settings(max_examples=60, deadline=None)
    def test_shape_formula_property(self, t, k, stride):
        store = ParamStore()
        conv = Conv1d(store, "c", 1, 1, kernel=k, stride=stride, rng=np.random.default_rng(0))
        if t < k:
            with pytest.raises(ValueError):
                conv.forward(np.zeros((1, t, 1)))
        else:
            out, _ = conv.forward(np.zeros((1, t, 1)))
            assert out.shape[1] == (t - k) // stride + 1


class TestBatchNorm:
    def test_train_on_normalized_input(self):
        store = ParamStore()
        bn = BatchNorm1d(store, "bn", 3)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 50, 3))
        x = (x - x.mean(axis=(0, 1))) / x.std(axis=(0, 1))
        out, _ = bn.forward(x, training=True)
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_eval_closed_form(self):
        store = ParamStore()
        bn = BatchNorm1d(store, "bn", 1)
        bn.gamma.value[...] = 2.0
        bn.beta.value[...] = 1.0
        bn.run_mean[...] = 0.0
        bn.run_var[...] = 1.0
        out, _ = bn.forward(np.full((1, 1, 1), 3.0), training=False)
        expected = 2.0 * 3.0 / np.sqrt(1.0 + 1e-5) + 1.0
        assert out.ravel()[0] == pytest.approx(expected, rel=1e-12)
        assert out.ravel()[0] == pytest.approx(7.0, abs=1e-4)

    def test_running_stats_update(self):
        store = ParamStore()
        bn = BatchNorm1d(store, "bn", 1)
        x = np.full((2, 5, 1), 10.0)
        bn.forward(x, training=True)
        assert bn.run_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 10.0)


class TestGRU:
    def _zero_gru(self, d_in, d):
        store = ParamStore()
        gru = GRULayer(store, "g", d_in, d, rng=np.random.default_rng(0))
        for p in store.params.values():
            p.value[...] = 0.0
        return gru

    def test_zero_params_zero_h0(self):
        gru = self._zero_gru(2, 3)
        out, _ = gru.forward(np.random.default_rng(1).normal(size=(4, 7, 2)))
        np.testing.assert_array_equal(out, 0.0)

    def test_zero_params_decay(self):
        # z = 0.5 and n = 0 imply h_t = h_{t-1}/2 = c / 2^t
        gru = self._zero_gru(1, 4)
        c = np.full((2, 4), 3.0)
        out, _ = gru.forward(np.zeros((2, 5, 1)), h0=c)
        for t in range(5):
            np.testing.assert_allclose(out[:, t], 3.0 / 2 ** (t + 1), rtol=1e-14)

    def test_single_step_matches_cell_oracle(self):
        rng = np.random.default_rng(7)
        store = ParamStore()
        gru = GRULayer(store, "g", 3, 5, rng=rng)
        x = rng.normal(size=(2, 1, 3))
        h0 = rng.normal(size=(2, 5))
        out, _ = gru.forward(x, h0=h0)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        xt = x[:, 0]
        r = sig(xt @ gru.w_r.value + h0 @ gru.u_r.value + gru.b_r.value)
        z = sig(xt @ gru.w_z.value + h0 @ gru.u_z.value + gru.b_z.value)
        n = np.tanh(
            xt @ gru.w_n.value + gru.b_in.value + r * (h0 @ gru.u_n.value + gru.b_hn.value)
        )
        h1 = (1 - z) * n + z * h0
        np.testing.assert_allclose(out[:, 0], h1, rtol=1e-12)


class TestAttentionPool:
    def test_gate_zero_returns_last_state_bit_exact(self):
        store = ParamStore()
        pool = AttentionPool(store, "p", 4, rng=np.random.default_rng(0))
        h = np.random.default_rng(1).normal(size=(3, 6, 4))
        out, _ = pool.forward(h)
        assert np.array_equal(out, h[:, -1])

    def test_single_timestep(self):
        store = ParamStore()
        pool = AttentionPool(store, "p", 4, rng=np.random.default_rng(0))
        pool.gate.value[...] = 0.3
        h = np.random.default_rng(2).normal(size=(2, 1, 4))
        out, _ = pool.forward(h)
        np.testing.assert_allclose(out, 1.3 * h[:, 0], rtol=1e-14)

    def test_identical_states_context_is_that_state(self):
        store = ParamStore()
        pool = AttentionPool(store, "p", 4, rng=np.random.default_rng(3))
        pool.gate.value[...] = 1.0
        row = np.random.default_rng(4).normal(size=4)
        h = np.tile(row, (2, 5, 1))
        out, ctx = pool.forward(h)
        np.testing.assert_allclose(ctx[3], np.tile(row, (2, 1)), rtol=1e-14)
        np.testing.assert_allclose(out, 2.0 * np.tile(row, (2, 1)), rtol=1e-14)


class TestSelfAttention:
    def test_identical_rows_uniform_attention(self):
        rng = np.random.default_rng(5)
        row = rng.normal(size=6)
        h = np.tile(row, (2, 4, 1))
        out, ctx = attention_forward(h, h, h)
        np.testing.assert_allclose(ctx[3], 0.25, atol=1e-14)
        np.testing.assert_allclose(out, h, rtol=1e-12)

    def test_single_row(self):
        rng = np.random.default_rng(6)
        q = rng.normal(size=(1, 1, 4))
        v = rng.normal(size=(1, 1, 4))
        out, ctx = attention_forward(q, q, v)
        np.testing.assert_allclose(ctx[3], [[[1.0]]])
        np.testing.assert_allclose(out, v)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        h = rng.normal(size=(3, 8, 5))
        _, ctx = attention_forward(h, h, h)
        np.testing.assert_allclose(ctx[3].sum(axis=-1), 1.0, atol=1e-12)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        store = ParamStore()
        p = store.parameter("w", np.array([1.0, -2.0]))
        p.grad[...] = np.array([0.5, -3.0])
        adam_step(store, lr=1e-3)
        np.testing.assert_allclose(p.value, [1.0 - 1e-3, -2.0 + 1e-3], atol=1e-9)

    def test_zero_gradient_no_change(self):
        store = ParamStore()
        p = store.parameter("w", np.array([1.0, 2.0]))
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(p.value, [1.0, 2.0])

    def test_constant_gradient_steady_magnitude(self):
        store = ParamStore()
        p = store.parameter("w", np.array([0.0]))
        prev = p.value.copy()
        for _ in range(2):
            p.grad[...] = 2.0
            adam_step(store, lr=1e-3)
            assert abs(p.value[0] - prev[0]) == pytest.approx(1e-3, rel=1e-4)
            prev = p.value.copy()

    def test_gradients_zeroed_after_step(self):
        store = ParamStore()
        p = store.parameter("w", np.array([1.0]))
        p.grad[...] = 5.0
        adam_step(store)
        assert p.grad[0] == 0.0


# -- finite-difference gradient verification ------------------------------


def _check_layer(build, x_shape, seed, tol=1e-4, loss_scale=0.1):
    """Register the input as a parameter and fd-check every coordinate."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    x_p = store.parameter("x", rng.normal(size=x_shape))
    layer_fwd = build(store, rng)
    sample_out, _ = layer_fwd(x_p.value)
    proj = rng.normal(size=sample_out.shape) * loss_scale

    def loss_fn(compute_grads: bool) -> float:
        out, ctx = layer_fwd(x_p.value)
        loss = float((out * proj).sum())
        if compute_grads:
            dx = layer_fwd.backward(proj, ctx)
            x_p.grad += dx
        return loss

    err = grad_check(loss_fn, store)
    assert err < tol, f"max rel err {err:.3e}"


class _Wrap:
    def __init__(self, fwd, bwd):
        self._fwd, self.backward = fwd, bwd

    def __call__(self, x):
        return self._fwd(x)


def test_grad_check_quadratic_oracle():
    store = ParamStore()
    p = store.parameter("theta", np.array([3.0]))

    def loss_fn(compute_grads):
        if compute_grads:
            p.grad += 2.0 * p.value
        return float(p.value[0] ** 2)

    assert grad_check(loss_fn, store) < 1e-9


def test_grad_check_linear_is_exact():
    store = ParamStore()
    p = store.parameter("theta", np.array([1.0, -2.0, 0.5]))
    c = np.array([2.0, 3.0, -1.0])

    def loss_fn(compute_grads):
        if compute_grads:
            p.grad += c
        return float(c @ p.value)

    assert grad_check(loss_fn, store) < 1e-10


def test_linear_gradients():
    def build(store, rng):
        lin = Linear(store, "l", 4, 3, rng)
        return _Wrap(lin.forward, lin.backward)

    _check_layer(build, (5, 4), seed=10)


def test_conv1d_gradients():
    def build(store, rng):
        conv = Conv1d(store, "c", 3, 4, kernel=3, stride=2, rng=rng)
        return _Wrap(conv.forward, conv.backward)

    _check_layer(build, (2, 9, 3), seed=11)


def test_batchnorm_train_gradients():
    def build(store, rng):
        bn = BatchNorm1d(store, "bn", 3)
        bn.gamma.value[...] = rng.uniform(0.8, 1.2, size=3)
        bn.beta.value[...] = rng.uniform(-0.1, 0.1, size=3)
        return _Wrap(lambda x: bn.forward(x, training=True), bn.backward)

    _check_layer(build, (3, 6, 3), seed=12)


def test_gru_gradients():
    def build(store, rng):
        gru = GRULayer(store, "g", 3, 4, rng=rng)
        return _Wrap(gru.forward, gru.backward)

    _check_layer(build, (2, 6, 3), seed=13)


def test_attention_pool_gradients():
    def build(store, rng):
        pool = AttentionPool(store, "p", 4, rng=rng)
        pool.gate.value[...] = 0.7
        return _Wrap(pool.forward, pool.backward)

    _check_layer(build, (3, 5, 4), seed=14)


def test_gru_stack_random_shapes_gradients():
    rng_shapes = np.random.default_rng(99)
    for trial in range(3):
        b = int(rng_shapes.integers(1, 4))
        t = int(rng_shapes.integers(2, 7))
        d_in = int(rng_shapes.integers(1, 5))
        d = int(rng_shapes.integers(2, 5))

        def build(store, rng, d_in=d_in, d=d):
            g1 = GRULayer(store, "g1", d_in, d, rng=rng)
            g2 = GRULayer(store, "g2", d, d, rng=rng)

            def fwd(x):
                h1, c1 = g1.forward(x)
                h2, c2 = g2.forward(h1)
                return h2, (c1, c2)

            def bwd(dout, ctx):
                c1, c2 = ctx
                return g1.backward(g2.backward(dout, c2), c1)

            return _Wrap(fwd, bwd)

        _check_layer(build, (b, t, d_in), seed=100 + trial)
