"""Tensor core: op semantics, gradient correctness, Adam."""

import math

import numpy as np
import pytest

from coopdrive import tensor as T
from coopdrive.errors import ContractError, DimensionError, ParameterError


def fd_grad(loss_fn, arr: np.ndarray, idx, h: float = 1e-6) -> float:
    """Central finite difference of a scalar closure w.r.t. one coordinate."""
    orig = arr[idx]
    arr[idx] = orig + h
    up = loss_fn()
    arr[idx] = orig - h
    down = loss_fn()
    arr[idx] = orig
    return (up - down) / (2.0 * h)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    x = np.arange(9.0).reshape(3, 3)
    out = T.matmul(T.constant(np.eye(3)), T.constant(x))
    assert np.array_equal(out.data, x)


def test_matmul_hand_case():
    a = T.constant([[1.0, 2.0], [3.0, 4.0]])
    b = T.constant([[1.0], [1.0]])
    assert np.array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))


def test_matmul_gradient_matches_closed_form_and_fd():
    rng = np.random.default_rng(7)
    a = T.parameter(rng.normal(size=(4, 5)))
    b = T.constant(rng.normal(size=(5, 2)))
    a.zero_grad()
    loss = T.sum_all(T.matmul(a, b))
    T.backward(loss)
    expected = np.ones((4, 2)) @ b.data.T
    assert np.allclose(a.grad, expected, atol=1e-12)

    def loss_fn():
        with T.no_grad():
            return float(T.sum_all(T.matmul(a, b)).data[0, 0])

    for idx in [(0, 0), (2, 3), (3, 4)]:
        num = fd_grad(loss_fn, a.data, idx)
        assert abs(num - a.grad[idx]) < 1e-4 * max(1.0, abs(num))


# ---------------------------------------------------------------------------
# softmax


def test_softmax_single_element_row():
    out = T.softmax_rows(T.constant([[3.7]]))
    assert out.data[0, 0] == 1.0


def test_softmax_symmetry():
    out = T.softmax_rows(T.constant([[0.0, 0.0]]))
    assert np.array_equal(out.data, [[0.5, 0.5]])


def test_softmax_scalar_oracle():
    # expected values from direct scalar evaluation
    exps = [math.exp(x) for x in (1.0, 2.0, 3.0)]
    total = sum(exps)
    expected = [e / total for e in exps]
    out = T.softmax_rows(T.constant([[1.0, 2.0, 3.0]]))
    assert np.allclose(out.data[0], expected, atol=1e-15)
    assert abs(out.data[0, 0] - 0.0900) < 5e-5
    assert abs(out.data[0, 2] - 0.6652) < 5e-5


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = T.softmax_rows(T.constant(rng.normal(scale=50.0, size=(20, 9))))
    assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)
    assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) < 1e-12


def test_softmax_large_values_stable():
    out = T.softmax_rows(T.constant([[1e6, 1e6 + 1.0]]))
    assert math.isfinite(out.data.sum())


# ---------------------------------------------------------------------------
# layer norm


def _ln(vals, gain=None, bias=None):
    d = len(vals)
    g = T.parameter(np.ones((1, d)) if gain is None else np.array([gain]))
    b = T.parameter(np.zeros((1, d)) if bias is None else np.array([bias]))
    return T.layer_norm(T.constant([vals]), g, b)


def test_layer_norm_constant_row_is_zero():
    out = _ln([4.0, 4.0, 4.0])
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_unit_variance_row():
    out = _ln([1.0, -1.0])
    expected = 1.0 / math.sqrt(1.0 + T.LAYER_NORM_EPS)
    assert np.allclose(out.data, [[expected, -expected]], atol=1e-15)


def test_layer_norm_zero_gain_returns_bias():
    out = _ln([2.0, 9.0, -3.0], gain=[0.0, 0.0, 0.0], bias=[5.0, 6.0, 7.0])
    assert np.array_equal(out.data, [[5.0, 6.0, 7.0]])


def test_layer_norm_statistics():
    rng = np.random.default_rng(3)
    x = rng.normal(loc=4.0, scale=3.0, size=(10, 64))
    g = T.parameter(np.ones((1, 64)))
    b = T.parameter(np.zeros((1, 64)))
    out = T.layer_norm(T.constant(x), g, b).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-4


# ---------------------------------------------------------------------------
# gelu / relu / dropout


def test_gelu_zero():
    assert T.gelu(T.constant([[0.0]])).data[0, 0] == 0.0


def test_relu():
    out = T.relu(T.constant([[-1.0, 0.0, 2.0]]))
    assert np.array_equal(out.data, [[0.0, 0.0, 2.0]])


def test_dropout_eval_mode_is_identity():
    x = T.constant(np.ones((3, 3)))
    out = T.dropout(x, 0.1, np.random.default_rng(0), training=False)
    assert out is x


def test_dropout_training_mean():
    rng = np.random.default_rng(11)
    out = T.dropout(T.constant(np.ones((100, 100))), 0.1, rng, training=True)
    assert abs(out.data.mean() - 1.0) < 0.02


def test_dropout_bad_rate():
    with pytest.raises(ParameterError):
        T.dropout(T.constant([[1.0]]), 1.0, np.random.default_rng(0), True)


# ---------------------------------------------------------------------------
# backward contract


def test_backward_sum_gives_ones():
    w = T.parameter(np.arange(6.0).reshape(2, 3))
    w.zero_grad()
    T.backward(T.sum_all(w))
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_half_square_gives_w():
    w = T.parameter(np.arange(6.0).reshape(2, 3) - 2.5)
    w.zero_grad()
    T.backward(T.scale(T.sum_all(T.square(w)), 0.5))
    assert np.allclose(w.grad, w.data, atol=1e-15)


def test_backward_rejects_non_scalar():
    w = T.parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        T.backward(T.square(w))


def test_unreachable_parameter_keeps_zero_grad():
    w = T.parameter(np.ones((2, 2)))
    other = T.parameter(np.ones((2, 2)))
    w.zero_grad()
    other.zero_grad()
    T.backward(T.sum_all(T.square(w)))
    assert np.array_equal(other.grad, np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# per-op finite-difference sweep (invariant: analytic ~ central differences)


def _fd_sweep(make_loss, param: T.Tensor, n_coords: int = 6, tol: float = 1e-4):
    param.zero_grad()
    T.backward(make_loss())

    def loss_fn():
        with T.no_grad():
            return float(make_loss().data[0, 0])

    rng = np.random.default_rng(5)
    for _ in range(n_coords):
        idx = np.unravel_index(rng.integers(param.data.size), param.data.shape)
        num = fd_grad(loss_fn, param.data, idx)
        ana = param.grad[idx]
        assert abs(num - ana) <= tol * max(abs(num), abs(ana), 1e-2), (
            f"{make_loss.__name__} at {idx}: fd {num} vs analytic {ana}")


def test_gradients_match_fd_for_each_op():
    rng = np.random.default_rng(21)
    x = T.parameter(rng.normal(size=(4, 6)))
    row = T.parameter(rng.normal(size=(1, 6)))
    w = T.parameter(rng.normal(size=(6, 3)))
    gain = T.parameter(rng.normal(size=(1, 6)) + 1.0)
    bias = T.parameter(rng.normal(size=(1, 6)))

    cases = {
        "matmul": lambda: T.mean_all(T.square(T.matmul(x, w))),
        "add_row": lambda: T.mean_all(T.square(T.add_row(x, row))),
        "add": lambda: T.mean_all(T.square(T.add(x, x))),
        "scale": lambda: T.mean_all(T.square(T.scale(x, -1.7))),
        "relu": lambda: T.mean_all(T.square(T.relu(x))),
        "gelu": lambda: T.mean_all(T.square(T.gelu(x))),
        "softmax": lambda: T.mean_all(T.square(T.softmax_rows(x))),
        "layer_norm": lambda: T.mean_all(
            T.square(T.layer_norm(x, gain, bias))),
        "gather_rows": lambda: T.mean_all(
            T.square(T.gather_rows(x, np.array([0, 2, 2, 3])))),
        "gather_cols": lambda: T.mean_all(T.square(T.gather_cols_rowwise(
            x, np.array([[0, 5], [1, 1], [2, 0], [4, 3]])))),
        "interleave": lambda: T.mean_all(
            T.square(T.interleave_row(x, row, 2))),
    }
    for name, fn in cases.items():
        fn.__name__ = name
        for param in (x, row, w, gain, bias):
            param.zero_grad()
        _fd_sweep(fn, x)

    for param in (x, row, gain, bias, w):
        param.zero_grad()
    _fd_sweep(cases["layer_norm"], gain)
    _fd_sweep(cases["matmul"], w)
    _fd_sweep(cases["interleave"], row)


def test_block_mha_gradients_match_fd():
    rng = np.random.default_rng(9)
    z = T.parameter(rng.normal(size=(6, 8)))       # two blocks of three rows
    heads = [T.parameter(rng.normal(size=(8, 12))) for _ in range(2)]
    w_o = T.parameter(rng.normal(size=(8, 8)))

    def loss():
        return T.mean_all(T.square(T.block_mha(z, heads, w_o, 2, 4, 3)))

    loss.__name__ = "block_mha"
    for p in (z, w_o, *heads):
        p.zero_grad()
    _fd_sweep(loss, z)
    for p in (z, w_o, *heads):
        p.zero_grad()
    _fd_sweep(loss, heads[0])
    for p in (z, w_o, *heads):
        p.zero_grad()
    _fd_sweep(loss, w_o)


def test_dropout_gradient_with_frozen_mask():
    x = T.parameter(np.random.default_rng(2).normal(size=(5, 5)))

    def loss():
        rng = np.random.default_rng(42)   # identical mask on every call
        return T.mean_all(T.square(T.dropout(x, 0.3, rng, training=True)))

    loss.__name__ = "dropout"
    x.zero_grad()
    _fd_sweep(loss, x)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params():
    p = T.parameter(np.array([[1.5, -2.0]]))
    before = p.data.copy()
    state = T.AdamState.for_params([p])
    T.adam_step([p], [np.zeros((1, 2))], state, lr=0.001)
    assert np.array_equal(p.data, before)


def test_adam_first_step_magnitude():
    p = T.parameter(np.array([[1.0]]))
    state = T.AdamState.for_params([p])
    T.adam_step([p], [np.array([[1.0]])], state, lr=0.001)
    # bias-corrected first step moves by ~lr regardless of gradient scale
    assert abs((1.0 - p.data[0, 0]) - 0.001) < 1e-9


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(4)
        p = T.parameter(rng.normal(size=(3, 3)))
        state = T.AdamState.for_params([p])
        for _ in range(2):
            g = rng.normal(size=(3, 3))
            T.adam_step([p], [g], state, lr=0.01)
        return p.data

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    p = T.parameter(np.ones((2, 2)))
    state = T.AdamState.for_params([p])
    with pytest.raises(DimensionError):
        T.adam_step([p], [np.ones((3, 3))], state, lr=0.001)


def test_clip_grad_norm():
    p = T.parameter(np.ones((2, 2)))
    p.grad = np.full((2, 2), 10.0)
    norm = T.clip_grad_norm([p], 1.0)
    assert abs(norm - 20.0) < 1e-12
    assert abs(math.sqrt(float((p.grad ** 2).sum())) - 1.0) < 1e-12


def test_ops_are_pure_given_seed():
    rng1 = np.random.default_rng(8)
    rng2 = np.random.default_rng(8)
    x = T.constant(np.random.default_rng(1).normal(size=(4, 4)))
    a = T.dropout(T.gelu(x), 0.2, rng1, training=True)
    b = T.dropout(T.gelu(x), 0.2, rng2, training=True)
    assert np.array_equal(a.data, b.data)
