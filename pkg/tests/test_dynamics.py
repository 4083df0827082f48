import numpy as np
import pytest

from bilevel.diffgraph import FlatVector
from bilevel.dynamics import DynamicsSpec, DynState, gd_step, sgdm_step, unroll
from bilevel.exceptions import ConfigurationError, DivergenceError, PreconditionError
from bilevel.problems import Dataset, LogisticHOProblem, QuadraticProblem, SplitDataset


def vec(*values, name="w"):
    return FlatVector.from_groups({name: np.array(values, dtype=float)})


def quad_states(lam, eta, T, fixed_step=False):
    prob = QuadraticProblem(1)
    spec = DynamicsSpec(horizon=T, step_size=eta if fixed_step else None)
    hp = prob.hyperparams(target=lam, step=eta if eta > 0 else 1.0)
    return [float(s.values[0]) for s in unroll(spec, hp, prob).states]


def logistic_problem(seed=0, n=12):
    rng = np.random.default_rng(seed)
    X, y = rng.normal(size=(n, 3)), rng.integers(0, 3, n)
    data = SplitDataset(Dataset(X, y, np.arange(n)), Dataset(rng.normal(size=(4, 3)), [0, 1, 2, 0], n + np.arange(4)))
    return LogisticHOProblem(data, 3, learned_reg=True, learned_momentum=True)


def test_gd_step_examples():
    assert gd_step(vec(1.0), vec(2.0), 0.1).values[0] == pytest.approx(0.8, abs=1e-15)
    assert gd_step(vec(1.5), vec(0.0), 0.3).values[0] == 1.5
    assert gd_step(vec(0.0), vec(-0.5), 1.0).values[0] == 0.5


def test_gd_step_rejects_negative_step():
    with pytest.raises(PreconditionError):
        gd_step(vec(1.0), vec(1.0), -0.1)


def test_sgdm_step_examples():
    out = sgdm_step(DynState(vec(0.0), vec(1.0)), vec(1.0), 0.1, 0.5)
    assert out.v.values[0] == 1.5
    assert out.w.values[0] == pytest.approx(-0.15, abs=1e-15)
    still = sgdm_step(DynState(vec(2.0), vec(0.0)), vec(0.0), 0.1, 0.5)
    assert still.w.values[0] == 2.0 and still.v.values[0] == 0.0


def test_sgdm_without_momentum_is_gd():
    w, g = vec(0.3, -1.0), vec(2.0, 0.5)
    out = sgdm_step(DynState(w, FlatVector.zeros(w.layout)), g, 0.2, 0.0)
    np.testing.assert_array_equal(out.w.values, gd_step(w, g, 0.2).values)


def test_quadratic_unroll_examples():
    assert quad_states(2.0, 0.5, 2) == [0.0, 1.0, 1.5]
    assert quad_states(3.0, 1.0, 1) == [0.0, 3.0]
    assert quad_states(4.0, 0.0, 1, fixed_step=True) == [0.0, 0.0]


@pytest.mark.parametrize("eta", [0.05, 0.3, 0.77, 1.0])
@pytest.mark.parametrize("T", [1, 7, 50])
def test_quadratic_closed_form(eta, T):
    lam = -1.7
    assert abs(quad_states(lam, eta, T)[-1] - lam * (1 - (1 - eta) ** T)) <= 1e-12


def test_horizon_zero_keeps_initial_state():
    prob = QuadraticProblem(2, learned_init=True)
    hp = prob.hyperparams(target=1.0, init=[0.25, -4.0])
    trace = unroll(DynamicsSpec(horizon=0), hp, prob)
    assert len(trace.states) == 1
    np.testing.assert_array_equal(trace.final.values, [0.25, -4.0])


def test_trace_length_and_replay_are_exact():
    prob = logistic_problem()
    hp = prob.hyperparams(step=0.3, reg=0.01, momentum=0.6)
    spec = DynamicsSpec(kind="SGDM", horizon=9, momentum=None, batch_size=5, seed=3)
    trace = unroll(spec, hp, prob)
    assert len(trace.states) == 10
    np.testing.assert_array_equal(trace.states[0].values, trace.dynamics.initial_state(hp).values)
    assert trace.replay(hp).values.tobytes() == trace.final.values.tobytes()
    again = unroll(spec, hp, prob)
    assert all(a.values.tobytes() == b.values.tobytes() for a, b in zip(trace.states, again.states))
    assert again.schedule_hash == trace.schedule_hash


def test_round_robin_schedule():
    prob = logistic_problem(n=12)
    trace = unroll(DynamicsSpec(horizon=7, batch_size=5, seed=1), prob.hyperparams(reg=0.01, momentum=0.5), prob)
    # 12 examples in batches of 5 -> two batches visited alternately
    assert trace.step_inputs == [0, 1, 0, 1, 0, 1, 0]
    batches = trace.dynamics.batches
    assert len(batches) == 2 and not set(batches[0]) & set(batches[1])


def test_sgdm_trace_with_zero_momentum_matches_gd():
    prob = logistic_problem()
    hp = prob.hyperparams(step=0.2, reg=0.01, momentum=0.5)
    gd = unroll(DynamicsSpec(horizon=6, batch_size=4), hp, prob)
    sgdm = unroll(DynamicsSpec(kind="SGDM", horizon=6, momentum=0.0, batch_size=4), hp, prob)
    for a, b in zip(gd.states, sgdm.states):
        np.testing.assert_array_equal(a.values, b.values[: a.values.size])


def test_divergence_guard_names_the_step():
    prob = QuadraticProblem(1)
    with pytest.raises(DivergenceError) as err:
        unroll(DynamicsSpec(horizon=200), prob.hyperparams(target=1.0, step=3.0), prob)
    # |w_t| = |1 - (-2)^t| exceeds 1e8 first at t = 27
    assert err.value.step == 27


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        DynamicsSpec(kind="Adam")
    with pytest.raises(ConfigurationError):
        DynamicsSpec(horizon=-1)
    with pytest.raises(ConfigurationError):
        DynamicsSpec(kind="SGDM", momentum=1.0)
    with pytest.raises(ConfigurationError):
        unroll(DynamicsSpec(horizon=1), QuadraticProblem(1, learned_step=False).hyperparams(1.0),
               QuadraticProblem(1, learned_step=False))
