import numpy as np
import pytest

from bilevel.diffgraph import FlatVector, TapeBuilder


def random_tape(seed, max_nodes=60):
    """Random smooth-ish tape over inputs x (n,), y (n,), A (m, n); vector output.

    Returns ``(tape, inputs)`` with inputs drawn from the same seed.
    """
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    tb = TapeBuilder()
    x = tb.input("x", (n,))
    y = tb.input("y", (n,))
    A = tb.input("A", (m, n))
    pools = {n: [x, y], m: [A @ x]}
    scalars = []

    def pick(size):
        pool = pools[size]
        return pool[int(rng.integers(len(pool)))]

    while len(tb._nodes) < max_nodes:
        size = n if rng.random() < 0.5 else m
        a = pick(size)
        kind = int(rng.integers(13))
        if kind == 0:
            out = a + pick(size)
        elif kind == 1:
            out = a - pick(size)
        elif kind == 2:
            out = a * pick(size)
        elif kind == 3:
            out = tb.sigmoid(a)
        elif kind == 4:
            out = tb.exp(tb.sigmoid(a))
        elif kind == 5:
            out = tb.log(tb.sigmoid(a) + 1.0)
        elif kind == 6:
            out = tb.softmax(a)
        elif kind == 7:
            out = tb.log_softmax(a)
        elif kind == 8:
            # the shift keeps equal-valued nodes off the tie, where the derivative is conventional
            out = tb.relu(a) + tb.maximum(a, pick(size) * 0.5 + 0.123) * 0.5
        elif kind == 9:
            out = a / (tb.sigmoid(pick(size)) + 1.0)
        elif kind == 10:
            out = A @ a if size == n else A.T @ a
            size = m if size == n else n
        elif kind == 11:
            s = tb.sum(a)
            scalars.append(s)
            out = pick(size) * tb.sigmoid(s)
        else:
            out = tb.gather(tb.reshape(A * 0.5, (m, n)), rng.integers(0, n, m))
            size = m
        pools[size].append(out)
    outputs = [pools[n][-1], pools[m][-1]] + scalars[-2:]
    tape = tb.build(tb.concat(*outputs))
    inputs = FlatVector.from_groups({
        "x": rng.normal(size=n), "y": rng.normal(size=n), "A": rng.normal(size=(m, n)),
    })
    return tape, inputs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
