import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel.diffgraph import (PRIMITIVES, FlatVector, Layout, TapeBuilder, forward_eval, jvp, jvp_batch, vjp)
from bilevel.exceptions import ConfigurationError, NumericError, ShapeError
from bilevel.hypergrad import relative_errors

from conftest import random_tape


def scalar_tape(fn, names=("x",)):
    tb = TapeBuilder()
    args = [tb.input(n, ()) for n in names]
    return tb.build(fn(tb, *args))


def fv(**groups):
    return FlatVector.from_groups(groups)


# -- forward_eval -----------------------------------------------------------


def test_square_evaluates():
    tape = scalar_tape(lambda tb, x: x * x)
    assert forward_eval(tape, fv(x=3.0)).values[0] == 9.0


def test_identity_plus_zero():
    tape = scalar_tape(lambda tb, x: x + 0.0)
    assert forward_eval(tape, fv(x=-1.25)).values[0] == -1.25


def test_logsumexp_of_zeros_is_log2():
    tape = scalar_tape(lambda tb, x, y: tb.log(tb.exp(x) + tb.exp(y)), ("x", "y"))
    # oracle: log(e^0 + e^0) = log 2
    assert forward_eval(tape, fv(x=0.0, y=0.0)).values[0] == pytest.approx(math.log(2.0), abs=1e-15)


def test_missing_slot_is_configuration_error():
    tape = scalar_tape(lambda tb, x, y: x * y, ("x", "y"))
    with pytest.raises(ConfigurationError):
        forward_eval(tape, fv(x=1.0))


def test_non_finite_intermediate_reports_node():
    tb = TapeBuilder()
    x = tb.input("x", ())
    bad = tb.log(x - 5.0)
    tape = tb.build(bad * 2.0)
    with pytest.raises(NumericError) as err:
        forward_eval(tape, fv(x=1.0))
    assert tape.nodes[err.value.node].op == "log"


def test_reevaluation_is_bit_identical():
    tape, inputs = random_tape(3)
    a = forward_eval(tape, inputs).values
    b = forward_eval(tape, inputs).values
    assert a.tobytes() == b.tobytes()


def test_tape_is_topologically_ordered():
    tape, _ = random_tape(11, max_nodes=120)
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.args)


# -- vjp / jvp examples --------------------------------------------------------


def test_vjp_power_rule():
    tape = scalar_tape(lambda tb, x: x * x)
    assert vjp(tape, fv(x=3.0), [1.0]).values[0] == 6.0


def test_vjp_identity():
    tape = scalar_tape(lambda tb, x: x + 0.0)
    assert vjp(tape, fv(x=17.5), [1.0]).values[0] == 1.0


def test_vjp_sigmoid_at_zero():
    tape = scalar_tape(lambda tb, x: tb.sigmoid(x))
    # sigma'(0) = sigma(0) (1 - sigma(0)) = 0.25
    assert vjp(tape, fv(x=0.0), [1.0]).values[0] == pytest.approx(0.25, abs=1e-15)


def test_jvp_square():
    tape = scalar_tape(lambda tb, x: x * x)
    assert jvp(tape, fv(x=3.0), [1.0]).values[0] == 6.0
    assert jvp(tape, fv(x=3.0), [2.0]).values[0] == 12.0


def test_jvp_product_rule():
    tape = scalar_tape(lambda tb, x, y: x * y, ("x", "y"))
    assert jvp(tape, fv(x=2.0, y=5.0), [1.0, 0.0]).values[0] == 5.0


def test_shape_mismatch_rejected():
    tape = scalar_tape(lambda tb, x: x * x)
    with pytest.raises(ShapeError):
        vjp(tape, fv(x=3.0), [1.0, 2.0])
    with pytest.raises(ShapeError):
        jvp(tape, fv(x=3.0), [1.0, 2.0])


def test_relu_and_maximum_kink_derivative_is_zero():
    tb = TapeBuilder()
    x = tb.input("x", ())
    tape = tb.build(tb.relu(x) + tb.maximum(x, 0.0))
    assert vjp(tape, fv(x=0.0), [1.0]).values[0] == 0.0
    assert jvp(tape, fv(x=0.0), [1.0]).values[0] == 0.0


def test_every_primitive_has_both_rules():
    for name, prim in PRIMITIVES.items():
        assert callable(prim.vjp) and callable(prim.jvp), name


@pytest.mark.parametrize("op", sorted(set(PRIMITIVES) - {"concat"}))
def test_primitive_matches_central_differences(op, rng):
    tb = TapeBuilder()
    a = tb.input("a", (3, 4))
    b = tb.input("b", (3, 4))
    v = tb.input("v", (4,))
    build = {
        "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * v,
        "div": lambda: a / (tb.exp(b) + 1.0), "neg": lambda: -a, "matmul": lambda: a @ v,
        "transpose": lambda: a.T @ tb.sum(b, axis=1), "reshape": lambda: tb.reshape(a, (12,)),
        "exp": lambda: tb.exp(a), "log": lambda: tb.log(tb.exp(a) + 1.0), "sigmoid": lambda: tb.sigmoid(a),
        "relu": lambda: tb.relu(a), "maximum": lambda: tb.maximum(a, b), "sum": lambda: tb.sum(a * b, axis=0),
        "softmax": lambda: tb.softmax(a), "log_softmax": lambda: tb.log_softmax(a),
        "gather": lambda: tb.gather(a * b, [0, 3, 2]),
    }[op]
    tape = tb.build(tb.sum(build() * build()))
    inputs = FlatVector.from_groups({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4)),
                                     "v": rng.normal(size=4)})
    grad = vjp(tape, inputs, [1.0]).values
    numeric = np.empty_like(grad)
    for i in range(grad.size):
        p, m = inputs.values.copy(), inputs.values.copy()
        p[i] += 1e-5
        m[i] -= 1e-5
        numeric[i] = (forward_eval(tape, inputs.with_values(p)).values[0]
                      - forward_eval(tape, inputs.with_values(m)).values[0]) / 2e-5
    assert relative_errors(grad, numeric).max() <= 1e-6
    forward = jvp_batch(tape, inputs, np.eye(inputs.values.size))[:, 0]
    np.testing.assert_allclose(forward, grad, rtol=1e-12, atol=1e-12)


# -- properties on random tapes -------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_transpose_identity(seed):
    tape, inputs = random_tape(seed)
    rng = np.random.default_rng(seed + 1)
    t = rng.normal(size=inputs.values.size)
    c = rng.normal(size=tape.output_layout.size)
    lhs = float(c @ jvp(tape, inputs, t).values)
    rhs = float(vjp(tape, inputs, c).values @ t)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_jvp_is_linear(seed):
    tape, inputs = random_tape(seed)
    rng = np.random.default_rng(seed + 2)
    t1, t2 = rng.normal(size=(2, inputs.values.size))
    alpha, beta = rng.normal(size=2)
    lhs = jvp(tape, inputs, alpha * t1 + beta * t2).values
    rhs = alpha * jvp(tape, inputs, t1).values + beta * jvp(tape, inputs, t2).values
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, np.abs(lhs).max()))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_vjp_matches_central_differences(seed):
    tape, inputs = random_tape(seed, max_nodes=200)
    assert len(tape) <= 200
    c = np.random.default_rng(seed).normal(size=tape.output_layout.size)
    grad = vjp(tape, inputs, c).values
    numeric = np.empty_like(grad)
    for i in range(grad.size):
        p, m = inputs.values.copy(), inputs.values.copy()
        p[i] += 1e-5
        m[i] -= 1e-5
        numeric[i] = c @ (forward_eval(tape, inputs.with_values(p)).values
                          - forward_eval(tape, inputs.with_values(m)).values) / 2e-5
    assert relative_errors(grad, numeric).max() <= 1e-6


def test_jvp_batch_matches_single_jvps():
    tape, inputs = random_tape(99)
    tangents = np.random.default_rng(0).normal(size=(5, inputs.values.size))
    batch = jvp_batch(tape, inputs, tangents)
    for row, t in zip(batch, tangents):
        np.testing.assert_allclose(row, jvp(tape, inputs, t).values, rtol=1e-14, atol=1e-14)


# -- flat vectors ----------------------------------------------------------


def test_layout_offsets_are_disjoint_and_cover():
    layout = Layout([("a", (2, 3)), ("b", ()), ("c", (4,))])
    spans = sorted((layout.slice(n).start, layout.slice(n).stop) for n in layout)
    assert spans[0][0] == 0 and spans[-1][1] == layout.size == 11
    assert all(s1[1] == s2[0] for s1, s2 in zip(spans, spans[1:]))


def test_flat_vector_rejects_non_finite():
    with pytest.raises(NumericError):
        FlatVector([1.0, np.nan], Layout([("a", (2,))]))


def test_flat_vector_groups_round_trip():
    v = FlatVector.from_groups({"W": np.arange(6.0).reshape(2, 3), "b": [7.0, 8.0]})
    assert v.group("W").shape == (2, 3)
    np.testing.assert_array_equal(v["b"], [7.0, 8.0])
    assert FlatVector.from_groups(v.groups()) == v


def test_duplicate_groups_rejected():
    with pytest.raises(ConfigurationError):
        Layout([("a", 1), ("a", 2)])
