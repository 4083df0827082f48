import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bilevel.diffgraph import FlatVector
from bilevel.exceptions import ConfigurationError, NumericError, PreconditionError
from bilevel.problems import (REG_STRENGTH, Dataset, HyperParams, SplitDataset, accuracy, cross_entropy,
                              inner_loss, mse, outer_loss_validation)

finite = st.floats(-50, 50, allow_nan=False)


def weights(W, b):
    return FlatVector.from_groups({"W": np.atleast_2d(W), "b": np.atleast_1d(b)})


def test_cross_entropy_uniform_logits():
    assert cross_entropy(np.zeros(5), 2) == pytest.approx(math.log(5), abs=1e-15)


def test_cross_entropy_confident_correct_is_zero():
    assert cross_entropy(np.array([1e6, 0, 0]), 0) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_scalar_oracle():
    # -log softmax((1, 0))[0] = log(1 + e^-1)
    assert cross_entropy(np.array([1.0, 0.0]), 0) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-15)
    assert cross_entropy(np.array([1.0, 0.0]), 0) == pytest.approx(0.313262, abs=1e-6)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(PreconditionError):
        cross_entropy(np.zeros(3), 3)
    with pytest.raises(PreconditionError):
        cross_entropy(np.zeros(1), 0)


def test_cross_entropy_rows():
    logits = np.array([[0.0, 0.0], [2.0, -1.0]])
    np.testing.assert_allclose(cross_entropy(logits, [0, 1]), [math.log(2), 3 + math.log1p(math.exp(-3))])


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(2, 8), elements=finite), st.floats(-1e3, 1e3), st.data())
def test_cross_entropy_shift_invariant(logits, shift, data):
    y = data.draw(st.integers(0, len(logits) - 1))
    assert abs(cross_entropy(logits + shift, y) - cross_entropy(logits, y)) <= 1e-12 * max(1.0, abs(shift))


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1.0, 1.0], [0.0, 0.0]) == 1.0
    assert mse([2.0, 0.0], [0.0, 0.0]) == 2.0


def test_inner_loss_at_zero_weights_is_log2():
    batch = Dataset([[1.0], [-1.0]], [1, 0])
    lam = HyperParams.from_groups({"log_step": 0.0})
    assert inner_loss(lam, weights(np.zeros((2, 1)), np.zeros(2)), batch) == pytest.approx(math.log(2), abs=1e-15)


def test_inner_loss_regularizer_off_sentinel():
    batch = Dataset([[0.3, -1.2]], [1])
    w = weights([[0.5, 1.0], [-0.2, 0.1]], [0.1, -0.3])
    plain = inner_loss(HyperParams.from_groups({"log_step": 0.0}), w, batch)
    # flat vectors must be finite, so the -inf sentinel travels in a plain mapping
    off = inner_loss({"log_step": 0.0, REG_STRENGTH: -np.inf}, w, batch)
    assert off == plain
    assert plain == pytest.approx(cross_entropy(w["W"] @ [0.3, -1.2] + w["b"], 1), abs=1e-15)


def test_regularizer_contributes_nothing_at_zero():
    batch = Dataset([[1.0], [-1.0]], [1, 0])
    lam = HyperParams.from_groups({"log_step": 0.0, REG_STRENGTH: math.log(10.0)})
    assert inner_loss(lam, weights(np.zeros((2, 1)), np.zeros(2)), batch) == pytest.approx(math.log(2), abs=1e-15)


def test_regularizer_value():
    batch = Dataset([[1.0]], [0])
    w = weights([[1.0], [0.0]], [0.0, 2.0])
    lam = HyperParams.from_groups({"log_step": 0.0, REG_STRENGTH: math.log(0.5)})
    base = inner_loss(HyperParams.from_groups({"log_step": 0.0}), w, batch)
    assert inner_loss(lam, w, batch) == pytest.approx(base + 0.5 * (1.0 + 4.0), abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_inner_loss_is_midpoint_convex(seed):
    rng = np.random.default_rng(seed)
    k, d, n = rng.integers(2, 5), rng.integers(1, 5), rng.integers(1, 8)
    batch = Dataset(rng.normal(size=(n, d)), rng.integers(0, k, n))
    lam = HyperParams.from_groups({"log_step": 0.0, REG_STRENGTH: rng.normal()})
    w1 = weights(rng.normal(size=(k, d)) * 3, rng.normal(size=k))
    w2 = weights(rng.normal(size=(k, d)) * 3, rng.normal(size=k))
    mid = w1.with_values(0.5 * (w1.values + w2.values))
    assert inner_loss(lam, mid, batch) <= 0.5 * (inner_loss(lam, w1, batch) + inner_loss(lam, w2, batch)) + 1e-12


def test_outer_loss_single_example_equals_its_loss():
    val = Dataset([[2.0, -1.0]], [1])
    w = weights([[0.1, 0.2], [0.3, -0.4]], [0.0, 0.5])
    logits = w["W"] @ [2.0, -1.0] + w["b"]
    assert outer_loss_validation(w, None, val) == pytest.approx(cross_entropy(logits, 1), abs=1e-15)


def test_outer_loss_perfect_classifier_is_near_zero():
    val = Dataset(np.eye(3), [0, 1, 2])
    w = weights(np.eye(3) * 1e3, np.zeros(3))
    assert outer_loss_validation(w, None, val) == pytest.approx(0.0, abs=1e-12)


def test_outer_loss_empty_val_rejected():
    with pytest.raises(PreconditionError):
        outer_loss_validation(weights(np.zeros((2, 1)), np.zeros(2)), None, Dataset(np.zeros((0, 1)), []))


def test_accuracy_examples():
    labels = np.array([0, 1, 2])
    assert accuracy(np.eye(3), labels) == 1.0
    assert accuracy(np.roll(np.eye(3), 1, axis=1), labels) == 0.0
    assert accuracy(np.zeros((1, 5)), [0]) == 1.0
    assert accuracy(np.zeros((1, 5)), [3]) == 0.0


@settings(max_examples=100)
@given(arrays(np.float64, (6, 4), elements=finite), st.floats(1e-3, 1e3), st.data())
def test_accuracy_scale_invariant(logits, scale, data):
    labels = data.draw(arrays(np.int64, 6, elements=st.integers(0, 3)))
    assert accuracy(logits * scale, labels) == accuracy(logits, labels)


def test_split_dataset_invariants():
    train = Dataset([[0.0], [1.0]], [0, 1], ids=[0, 1])
    with pytest.raises(ConfigurationError):
        SplitDataset(train, Dataset([[2.0]], [0], ids=[1]))
    with pytest.raises(ConfigurationError):
        SplitDataset(train, Dataset(np.zeros((0, 1)), [], ids=[]))
    assert len(SplitDataset(train, Dataset(np.zeros((0, 1)), [], ids=[]), allow_empty_val=True).val) == 0
    with pytest.raises(ConfigurationError):
        SplitDataset(Dataset(np.zeros((0, 1)), [], ids=[]), train)


def test_hyperparams_are_finite_and_named():
    lam = HyperParams.from_groups({"log_step": math.log(0.1), "repr.0.weight": np.ones((2, 3))})
    assert lam.step_size == pytest.approx(0.1)
    assert lam.group("repr.0.weight").shape == (2, 3)
    with pytest.raises(NumericError):
        HyperParams.from_groups({"log_step": np.inf})
