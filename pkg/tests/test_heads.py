from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sand.errors import ConfigError, EmptyBatchError, LabelError, ShapeError
from sand.heads import (
    MultiTaskWeights,
    TaskHead,
    binary_loss,
    multiclass_loss,
    multilabel_loss,
    multitask_loss,
    regression_loss,
)
from sand.tensor import Tensor, backward


def test_binary_loss_hand_value():
    y = np.array([1, 0])
    p = np.array([0.8, 0.3])
    expected = -(math.log(0.8) + math.log(0.7)) / 2
    assert binary_loss(y, p).item() == pytest.approx(expected, abs=1e-12)


def test_binary_loss_is_finite_at_saturated_predictions():
    loss = binary_loss(np.array([1, 0]), np.array([0.0, 1.0])).item()
    assert math.isfinite(loss)
    assert loss == pytest.approx(-math.log(1e-12), rel=1e-5)  # 1 - (1 - 1e-12) rounds


@given(st.floats(0.01, 0.99))
def test_binary_loss_is_minimised_at_the_label(p):
    assert binary_loss(np.array([1]), np.array([0.999])).item() <= binary_loss(np.array([1]), np.array([p])).item()


def test_binary_loss_mask_ignores_padding():
    y = np.array([[1, 0, 1]])
    p = np.array([[0.9, 0.2, 0.01]])
    mask = np.array([[1.0, 1.0, 0.0]])
    expected = -(math.log(0.9) + math.log(0.8)) / 2
    assert binary_loss(y, p, mask).item() == pytest.approx(expected, abs=1e-12)


def test_multilabel_loss_averages_labels_then_batch():
    y = np.array([[1, 0], [0, 0]])
    p = np.array([[0.5, 0.5], [0.1, 0.2]])
    per = [(-math.log(0.5) - math.log(0.5)) / 2, (-math.log(0.9) - math.log(0.8)) / 2]
    assert multilabel_loss(y, p).item() == pytest.approx(sum(per) / 2, abs=1e-12)


def test_multiclass_loss_hand_value():
    p = np.array([[0.2, 0.7, 0.1], [0.5, 0.25, 0.25]])
    y = np.array([1, 2])
    assert multiclass_loss(y, p).item() == pytest.approx(-(math.log(0.7) + math.log(0.25)) / 2, abs=1e-12)


def test_multiclass_loss_rejects_bad_labels():
    with pytest.raises(LabelError):
        multiclass_loss(np.array([3]), np.array([[0.2, 0.3, 0.5]]))
    with pytest.raises(LabelError):
        multiclass_loss(np.array([-1]), np.array([[0.2, 0.3, 0.5]]))


def test_regression_loss_counts_only_valid_steps():
    target = np.array([[1.0, 2.0, 5.0]])
    pred = np.array([[2.0, 2.0, 0.0]])
    assert regression_loss(target, pred, np.array([[1, 1, 0]])).item() == pytest.approx(0.5)
    assert regression_loss(target, pred).item() == pytest.approx((1 + 0 + 25) / 3)


def test_regression_loss_with_no_valid_steps_raises():
    with pytest.raises(EmptyBatchError):
        regression_loss(np.ones((1, 2)), np.ones((1, 2)), np.zeros((1, 2)))


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        binary_loss(np.array([0, 1, 1]), np.array([0.5, 0.5]))


# -- multi-task weighting ---------------------------------------------------------------


def test_default_weights():
    assert MultiTaskWeights().as_dict() == {"ph": 0.8, "ihm": 0.5, "dc": 1.1, "los": 0.8}


def test_weight_aliases():
    w = MultiTaskWeights.from_mapping({"p": 1.0, "i": 2.0, "d": 3.0, "l": 4.0})
    assert w.as_dict() == {"ph": 1.0, "ihm": 2.0, "dc": 3.0, "los": 4.0}
    with pytest.raises(ConfigError):
        MultiTaskWeights.from_mapping({"x": 1.0})


@pytest.mark.parametrize("kw", [dict(ph=-0.1), dict(ph=0, ihm=0, dc=0, los=0)])
def test_invalid_weights(kw):
    with pytest.raises(ConfigError):
        MultiTaskWeights(**kw)


def test_multitask_loss_is_weighted_sum():
    losses = {"ph": Tensor(1.0), "ihm": Tensor(2.0), "dc": Tensor(3.0), "los": Tensor(4.0)}
    total = multitask_loss(losses, MultiTaskWeights())
    assert total.item() == pytest.approx(0.8 * 1 + 0.5 * 2 + 1.1 * 3 + 0.8 * 4)
    partial = multitask_loss({"ihm": Tensor(2.0), "dc": Tensor(3.0)}, MultiTaskWeights())
    assert partial.item() == pytest.approx(0.5 * 2 + 1.1 * 3)


def test_multitask_loss_needs_a_weight_per_task():
    with pytest.raises(ConfigError):
        multitask_loss({"other": Tensor(1.0)}, MultiTaskWeights())
    with pytest.raises(ConfigError):
        multitask_loss({}, {"a": 1.0})


def test_multitask_gradient_is_weighted_sum_of_task_gradients():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    a = lambda: (x * x).sum()
    b = lambda: (x * 3.0).sum()
    backward(a())
    ga = x.grad.copy()
    x.grad = None
    backward(b())
    gb = x.grad.copy()
    x.grad = None
    backward(multitask_loss({"ph": a(), "dc": b()}, MultiTaskWeights()))
    np.testing.assert_allclose(x.grad, 0.8 * ga + 1.1 * gb, atol=1e-15)


# -- heads --------------------------------------------------------------------------


def head_input(B=3, T=6, d=4):
    return Tensor(np.random.default_rng(0).standard_normal((B, T, d)))


@pytest.mark.parametrize(
    "kind,shape",
    [("binary", (3,)), ("multilabel:4", (3, 4)), ("multiclass:5", (3, 5)),
     ("per-step-binary", (3, 6)), ("per-step-regression", (3, 6))],
)
def test_head_output_shapes_and_ranges(kind, shape):
    head = TaskHead(kind, 4, 3, np.random.default_rng(0))
    out = head(head_input()).data
    assert out.shape == shape
    if kind == "per-step-regression":
        assert np.all(out >= 0)
    else:
        assert np.all((out >= 0) & (out <= 1))
    if kind.startswith("multiclass"):
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_binary_head_is_two_way_softmax():
    head = TaskHead("binary", 4, 3, np.random.default_rng(0))
    S = head_input()
    z = head.logits(S, None).data
    np.testing.assert_allclose(head(S).data, 1 / (1 + np.exp(z[:, 0] - z[:, 1])), atol=1e-12)


def test_sequence_head_respects_lengths():
    head = TaskHead("binary", 4, 2, np.random.default_rng(0))
    S = head_input()
    lengths = np.array([6, 4, 2])
    full = head(S, lengths).data
    for b, L in enumerate(lengths):
        alone = head(Tensor(S.data[b : b + 1, :L]), None).data
        assert full[b] == pytest.approx(alone[0], abs=1e-12)


def test_unknown_head_kind():
    with pytest.raises(ConfigError):
        TaskHead("ranking", 4, 2, np.random.default_rng(0))
