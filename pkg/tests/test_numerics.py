import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dictg2p.numerics import (
    DivergenceError,
    OptimizerState,
    ShapeError,
    TapeError,
    Tensor,
    adam_step,
    anneal_tau,
    backward,
    clamp_min,
    concat,
    embedding_lookup,
    exp,
    fresh_tape,
    layer_norm,
    log,
    matmul,
    mse_loss,
    noam_lr,
    relu,
    softmax_lastdim,
    unfold1d,
)
from dictg2p.numerics.gradcheck import check_gradients

SEEDS = range(10)


def rand(rng, *shape, dtype=np.float64):
    return Tensor(rng.normal(size=shape).astype(dtype), requires_grad=True)


def weighted_sum(y, rng_seed=123):
    w = np.random.default_rng(rng_seed).normal(size=y.shape)
    return (y * w).sum()


# each entry builds (fn, inputs) for a seed; fn returns a scalar
def _case_add(rng):
    return lambda a, b: weighted_sum(a + b), [rand(rng, 3, 4), rand(rng, 4)]


def _case_mul(rng):
    return lambda a, b: weighted_sum(a * b), [rand(rng, 2, 3, 4), rand(rng, 3, 1)]


def _case_matmul(rng):
    return lambda a, b: weighted_sum(matmul(a, b)), [rand(rng, 2, 3, 4), rand(rng, 4, 5)]


def _case_concat(rng):
    return lambda a, b: weighted_sum(concat([a, b], axis=1)), [rand(rng, 2, 3), rand(rng, 2, 2)]


def _case_embedding(rng):
    ids = rng.integers(0, 5, size=(2, 3))
    return lambda t: weighted_sum(embedding_lookup(t, ids)), [rand(rng, 5, 4)]


def _case_layer_norm(rng):
    gain = rand(rng, 5)
    return lambda x, g, b: weighted_sum(layer_norm(x, g, b)), [rand(rng, 3, 5), gain, rand(rng, 5)]


def _case_relu(rng):
    x = rand(rng, 4, 4)
    x.data[np.abs(x.data) < 1e-2] = 0.5  # keep clear of the kink
    return lambda x: weighted_sum(relu(x)), [x]


def _case_softmax(rng):
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    return lambda x: weighted_sum(softmax_lastdim(x, mask)), [rand(rng, 3, 5)]


def _case_mse(rng):
    target = rng.normal(size=(2, 3, 4))
    mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    return lambda p: mse_loss(p, target, mask), [rand(rng, 2, 3, 4)]


def _case_log_exp(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    return lambda x: weighted_sum(exp(log(clamp_min(x, 1e-10)) * 0.5)), [x]


def _case_unfold(rng):
    return lambda x: weighted_sum(unfold1d(x, 3)), [rand(rng, 2, 4, 3)]


def _case_transpose_reshape(rng):
    return lambda x: weighted_sum(x.transpose(2, 0, 1).reshape(4, 6)), [rand(rng, 2, 3, 4)]


def _case_mean(rng):
    return lambda x: weighted_sum(x.mean(axis=1)), [rand(rng, 3, 4)]


CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "concat": _case_concat,
    "embedding_lookup": _case_embedding,
    "layer_norm": _case_layer_norm,
    "relu": _case_relu,
    "softmax_lastdim": _case_softmax,
    "mse_loss": _case_mse,
    "log_exp_clamp": _case_log_exp,
    "unfold1d": _case_unfold,
    "transpose_reshape": _case_transpose_reshape,
    "mean": _case_mean,
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in SEEDS:
        fn, inputs = CASES[name](np.random.default_rng(seed))
        worst = max(worst, check_gradients(fn, inputs, h=1e-4))
    assert worst < 1e-5, f"{name}: max relative error {worst:.2e}"


def test_float32_gradients_against_float64_oracle():
    # float32 forward passes are too noisy for finite differences, so the
    # oracle runs in float64 on the same (float32-representable) inputs
    from dictg2p.numerics.gradcheck import analytic_grads, max_relative_error, numeric_grad

    worst = 0.0
    for name in ("layer_norm", "softmax_lastdim", "matmul", "mse_loss"):
        for seed in SEEDS:
            fn, inputs = CASES[name](np.random.default_rng(seed))
            t32 = [Tensor(t.data.astype(np.float32), requires_grad=True) for t in inputs]
            t64 = [Tensor(t.data.astype(np.float32).astype(np.float64), requires_grad=True) for t in inputs]
            got = analytic_grads(fn, t32)
            for i in range(len(inputs)):
                assert got[i].dtype == np.float32
                ref = numeric_grad(fn, t64, i, 1e-4)
                worst = max(worst, max_relative_error(got[i].astype(np.float64), ref, floor=1e-3))
    assert worst < 1e-3


def test_softmax_of_zeros_is_uniform():
    y = softmax_lastdim(Tensor(np.zeros(3)))
    np.testing.assert_allclose(y.data, [1 / 3] * 3)


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_array_equal(matmul(np.eye(2), Tensor(A)).data, A)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = softmax_lastdim(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_sum_gives_ones_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with fresh_tape():
        backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_mse_of_equal_inputs_has_zero_gradient():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 2)), requires_grad=True)
    with fresh_tape():
        backward(mse_loss(x, x.data.copy()))
    np.testing.assert_array_equal(x.grad, np.zeros((3, 2)))


def test_backward_twice_without_forward_fails():
    x = Tensor(np.ones(3), requires_grad=True)
    with fresh_tape():
        loss = (x * 2.0).sum()
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with fresh_tape():
        with pytest.raises(ShapeError):
            backward(x * 2.0)


def test_backward_visits_each_record_once_and_clears():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with fresh_tape() as tape:
        y = x * x
        loss = (y + y).sum()  # y reused: gradients must accumulate, not double-run
        n = len(tape)
        backward(loss)
        assert len(tape) == 0
    assert n == 3
    np.testing.assert_allclose(x.grad, 4 * x.data)


# -- optimizer -------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimizerState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_moves_downhill():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": 2 * p["w"]}, OptimizerState(), lr=0.1)
    assert p["w"][0] < 1.0


def test_adam_converges_on_quadratic():
    p = {"w": np.array([1.0, -3.0, 0.5])}
    state = OptimizerState()
    scales = np.array([1.0, 4.0, 0.5])
    for step in range(1, 201):
        lr = 0.2 * 0.98**step  # closed-form minimum sits at 0
        adam_step(p, {"w": 2 * scales * p["w"]}, state, lr)
    assert np.all(np.abs(p["w"]) < 1e-2)


def test_adam_nan_gradient_diverges():
    with pytest.raises(DivergenceError):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, OptimizerState(), lr=0.1)


def test_adam_hyperparameters():
    s = OptimizerState()
    assert (s.beta1, s.beta2, s.eps, s.step) == (0.9, 0.98, 1e-9, 0)


# -- schedules -------------------------------------------------------------


def test_noam_peak_value():
    assert noam_lr(4000, 4000, 192) == pytest.approx(192**-0.5 * 4000**-0.5)


def test_noam_peaks_at_warmup():
    peak = noam_lr(400, 400, 64)
    assert all(noam_lr(s, 400, 64) <= peak for s in range(1, 4001, 7))


def test_noam_decay_ratio():
    assert abs(noam_lr(800, 400, 64) / noam_lr(400, 400, 64) - 2**-0.5) < 1e-9


def test_tau_schedule():
    assert anneal_tau(0) == 1.0
    assert anneal_tau(10**9) == 0.1
    taus = [anneal_tau(s) for s in range(0, 2_000_000, 7919)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    assert anneal_tau(999) == 1.0
    assert anneal_tau(1000) == pytest.approx(math.exp(-1e-2))


def test_determinism_of_optimizer_trajectory():
    def run():
        rng = np.random.default_rng(5)
        p = {"a": rng.normal(size=(4, 3))}
        x = rng.normal(size=(10, 4))
        y = rng.normal(size=(10, 3))
        state = OptimizerState()
        for step in range(1, 101):
            a = Tensor(p["a"], requires_grad=True)
            with fresh_tape():
                backward(mse_loss(matmul(x, a), y))
            adam_step(p, {"a": a.grad}, state, noam_lr(step, 10, 4))
        return p["a"]

    np.testing.assert_array_equal(run(), run())
