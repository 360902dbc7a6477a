from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sand import tensor as tn
from sand.errors import DegenerateRowError, ShapeError, UsageError
from sand.tensor import Tensor, backward, grad_check

TOL = 1e-6


def weighted_sum(y: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe with non-uniform weights so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return tn.sum_(y * w)


def param(shape, seed=0, low=None):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


# -- gradient checks, one per primitive ----------------------------------------

UNARY = {
    "neg": (tn.neg, None),
    "sigmoid": (tn.sigmoid, None),
    "exp": (tn.exp, None),
    "log": (tn.log, 0.5),
    "relu": (tn.relu, 0.1),  # kept away from the kink
    "sum_axis": (lambda x: tn.sum_(x, axis=1), None),
    "mean_axis": (lambda x: tn.mean(x, axis=0, keepdims=True), None),
    "reshape": (lambda x: tn.reshape(x, (4, 3)), None),
    "transpose": (lambda x: tn.transpose(x), None),
    "swap_last": (tn.swap_last, None),
    "slice_basic": (lambda x: x[1:, ::2], None),
    "slice_fancy": (lambda x: tn.slice_(x, (np.array([0, 2, 2]), np.array([1, 0, 1]))), None),
    "softmax": (tn.softmax_last, None),
    "clip": (lambda x: tn.clip(x, -0.3, 0.4), None),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, low = UNARY[name]
    x = param((3, 4), seed=1, low=low)
    if name == "clip":
        # keep entries off the clip boundaries
        x.data = np.where(np.abs(x.data + 0.3) < 0.05, x.data + 0.1, x.data)
        x.data = np.where(np.abs(x.data - 0.4) < 0.05, x.data + 0.1, x.data)
    assert grad_check(lambda t: weighted_sum(fn(t)), x) < TOL


BINARY = {
    "add": tn.add,
    "sub": tn.sub,
    "mul": tn.mul,
    "div": tn.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("b_shape", [(3, 4), (4,), (3, 1)])
def test_binary_gradients_with_broadcasting(name, b_shape):
    fn = BINARY[name]
    a = param((3, 4), seed=2)
    b = param(b_shape, seed=3, low=0.5)
    assert grad_check(lambda t: weighted_sum(fn(t, b)), a) < TOL
    assert grad_check(lambda t: weighted_sum(fn(a, t)), b) < TOL


def test_matmul_gradients_batched():
    a = param((2, 3, 4), seed=4)
    b = param((4, 5), seed=5)
    assert grad_check(lambda t: weighted_sum(tn.matmul(t, b)), a) < TOL
    assert grad_check(lambda t: weighted_sum(tn.matmul(a, t)), b) < TOL


def test_concat_gradients():
    a = param((2, 3), seed=6)
    b = param((2, 2), seed=7)
    assert grad_check(lambda t: weighted_sum(tn.concat([t, b], axis=1)), a) < TOL
    assert grad_check(lambda t: weighted_sum(tn.concat([a, t], axis=1)), b) < TOL


@pytest.mark.parametrize("h", [1, 3])
def test_conv1d_gradients(h):
    x = param((2, 6, 3), seed=8)
    w = param((4, 3, h), seed=9)
    b = param((4,), seed=10)
    assert grad_check(lambda t: weighted_sum(tn.conv1d(t, w, b)), x) < TOL
    assert grad_check(lambda t: weighted_sum(tn.conv1d(x, t, b)), w) < TOL
    assert grad_check(lambda t: weighted_sum(tn.conv1d(x, w, t)), b) < TOL


def test_layer_norm_gradients():
    x = param((2, 3, 5), seed=11)
    g = param((5,), seed=12)
    b = param((5,), seed=13)
    assert grad_check(lambda t: weighted_sum(tn.layer_norm(t, g, b)), x) < TOL
    assert grad_check(lambda t: weighted_sum(tn.layer_norm(x, t, b)), g) < TOL
    assert grad_check(lambda t: weighted_sum(tn.layer_norm(x, g, t)), b) < TOL


def test_dropout_gradient_with_fixed_mask():
    x = param((3, 4), seed=14)
    mask = tn.dropout_mask(x.shape, 0.3, np.random.default_rng(0))
    assert grad_check(lambda t: weighted_sum(tn.dropout(t, 0.3, mask=mask)), x) < TOL


@pytest.mark.parametrize("r", [0, 2, 7])
def test_band_ops_gradients(r):
    q = param((2, 6, 3), seed=15)
    k = param((2, 6, 3), seed=16)
    p = param((2, 6, r + 1), seed=17)
    v = param((2, 6, 3), seed=18)
    assert grad_check(lambda t: weighted_sum(tn.band_scores(t, k, r)), q) < TOL
    assert grad_check(lambda t: weighted_sum(tn.band_scores(q, t, r)), k) < TOL
    assert grad_check(lambda t: weighted_sum(tn.band_mix(t, v)), p) < TOL
    assert grad_check(lambda t: weighted_sum(tn.band_mix(p, t)), v) < TOL


# -- forward oracles -------------------------------------------------------------


def test_band_ops_match_dense_forms():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((2, 7, 3)) for _ in range(3))
    r = 3
    scores = tn.band_scores(q, k, r).data
    full = q @ np.swapaxes(k, -1, -2)
    for t in range(7):
        for o in range(r + 1):
            expected = full[:, t, t - o] if t - o >= 0 else 0.0
            np.testing.assert_allclose(scores[:, t, o], expected, atol=1e-12)
    p = rng.random((2, 7, r + 1))
    np.testing.assert_allclose(tn.band_mix(p, v).data, tn.band_to_dense(p) @ v, atol=1e-12)


def test_conv1d_with_unit_kernel_is_a_matmul(rng):
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((4, 3, 1))
    b = rng.standard_normal(4)
    out = tn.conv1d(x, w, b).data
    np.testing.assert_allclose(out, x @ w[:, :, 0].T + b, atol=1e-12)


def test_conv1d_wider_kernel_hand_case():
    # single channel, kernel [1, 2, 3] centred, zero padding
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
    w = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3)
    out = tn.conv1d(x, w, np.zeros(1)).data.ravel()
    np.testing.assert_allclose(out, [2 * 1 + 3 * 2, 1 * 1 + 2 * 2 + 3 * 3, 1 * 2 + 2 * 3])


def test_conv1d_rejects_even_kernel():
    with pytest.raises(UsageError):
        tn.conv1d(np.zeros((1, 4, 2)), np.zeros((3, 2, 2)), np.zeros(3))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        tn.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_layer_norm_output_is_standardized(rng):
    x = rng.standard_normal((4, 10)) * 3 + 2
    y = tn.layer_norm(x, np.ones(10), np.zeros(10)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_sigmoid_is_stable_for_large_inputs():
    y = tn.sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])


# -- softmax -------------------------------------------------------------------------

finite_rows = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 5), st.integers(1, 8)),
    elements=st.floats(-50, 50, allow_nan=False),
)


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    p = tn.softmax_last(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@given(finite_rows, st.floats(-100, 100))
def test_softmax_is_shift_invariant(x, c):
    np.testing.assert_allclose(tn.softmax_last(x).data, tn.softmax_last(x + c).data, atol=1e-12)


def test_softmax_masked_entries_are_exactly_zero():
    x = np.array([[0.3, -np.inf, 1.0, -np.inf]])
    p = tn.softmax_last(x).data
    assert p[0, 1] == 0.0 and p[0, 3] == 0.0


def test_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        tn.softmax_last(np.array([[0.0, 1.0], [-np.inf, -np.inf]]))


# -- graph mechanics ---------------------------------------------------------------


def test_shared_subexpression_gradients_accumulate():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1
    backward(tn.sum_(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(tn.sum_(x * 3.0))
    backward(tn.sum_(x * 3.0))
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(x * 2.0)


def test_topological_order_lists_parents_first():
    a = Tensor(np.ones(2), requires_grad=True)
    b = a * 2.0
    c = b + a
    d = tn.sum_(c * b)
    order = tn.topological_order(d)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]
    assert len(order) == len({id(n) for n in order})


def test_constants_do_not_track_gradients():
    a = Tensor(np.ones(2))
    out = a * 3.0
    assert not out.requires_grad and out._parents == ()


def test_identical_graphs_give_bitwise_identical_gradients():
    def run():
        x = param((4, 5), seed=3)
        w = param((5, 2), seed=4)
        backward(tn.sum_(tn.sigmoid(tn.matmul(x, w))))
        return x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


# -- dropout ---------------------------------------------------------------------


def test_dropout_is_identity_in_eval_mode(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(tn.dropout(x, 0.5, rng=rng, training=False).data, x)
    np.testing.assert_array_equal(tn.dropout(x, 0.0, rng=rng).data, x)


def test_dropout_keeps_expectation():
    x = np.ones((200, 200))
    y = tn.dropout(x, 0.3, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.7}
    assert abs(y.mean() - 1.0) < 0.02


def test_dropout_needs_rng_in_training():
    with pytest.raises(UsageError):
        tn.dropout(np.ones(3), 0.5)


# -- serialization -----------------------------------------------------------------


@settings(max_examples=50)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=False, width=64)))
def test_tensor_bytes_round_trip(arr):
    buf = tn.tensor_to_bytes(arr)
    back, end = tn.tensor_from_bytes(buf)
    assert end == len(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()
