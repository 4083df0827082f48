"""Hypergradients of ``f(lam) = E(s_T(lam), lam)`` through unrolled dynamics.

Reverse mode runs the adjoint recursion over a stored :class:`Trace`::

    a_T = dE/ds_T
    a_{t-1} = a_t . dPhi_t/ds          dlam += a_t . dPhi_t/dlam
    dlam += dE/dlam + a_0 . dPhi_0/dlam

Forward mode carries the tangent matrix ``Z_t = ds_t/dlam`` alongside the
dynamics (``Z_t = dPhi_t/ds . Z_{t-1} + dPhi_t/dlam``) and needs no trace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffgraph import FlatVector, Layout, Tape, push_tangents, value_and_vjp
from .dynamics import Dynamics, DynamicsSpec, Trace, check_divergence, schedule_hash, unroll
from .exceptions import ConfigurationError, NumericError, PreconditionError, StaleTraceError
from .problems import BilevelProblem

#: columns of the forward-mode tangent matrix pushed per pass
TANGENT_CHUNK = 64


@dataclass
class HyperGrad:
    """Gradient w.r.t. the hyperparameters, plus the outer value it was taken at."""

    grad: FlatVector
    mode: str
    horizon_used: int
    value: float | None = None
    ground: list | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad.values)):
            raise NumericError("hypergradient has non-finite entries")

    @property
    def values(self) -> np.ndarray:
        return self.grad.values

    def __getitem__(self, name):
        return self.grad.group(name)


def _check_trace(trace: Trace, lam: FlatVector) -> None:
    expected = schedule_hash(trace.dynamics.spec.seed, trace.step_inputs, lam)
    if expected != trace.schedule_hash:
        raise StaleTraceError("trace was recorded with different hyperparameters or schedule")


def _outer(dyn: Dynamics, outer: Tape | None) -> Tape:
    return dyn.outer_tape if outer is None else outer


def reverse_hypergrad(trace: Trace, outer: Tape | None, lam: FlatVector) -> HyperGrad:
    """Exact hypergradient by the adjoint recursion; ``outer=None`` uses the problem's loss."""
    _check_trace(trace, lam)
    dyn = trace.dynamics
    n_state = dyn.n_state
    value, g = value_and_vjp(_outer(dyn, outer), dyn.inputs(trace.final, lam), 1.0)
    adjoint = g.values[:n_state]
    dlam = g.values[n_state:].copy()
    for t in range(trace.horizon, 0, -1):
        tape = dyn.transition_tape(trace.step_inputs[t - 1])
        _, g = value_and_vjp(tape, dyn.inputs(trace.states[t - 1], lam), adjoint)
        adjoint = g.values[:n_state]
        dlam += g.values[n_state:]
        if not np.all(np.isfinite(adjoint)):
            raise NumericError(f"non-finite adjoint at step {t}")
    _, g = value_and_vjp(dyn.init_tape, lam, adjoint)
    dlam += g.values
    return HyperGrad(FlatVector(dlam, lam.layout), "reverse", trace.horizon, float(value))


def approx_hypergrad(trace: Trace, outer: Tape | None, lam: FlatVector) -> HyperGrad:
    """Only the explicit partial ``dE/dlam``, with ``s_T`` held constant."""
    _check_trace(trace, lam)
    dyn = trace.dynamics
    value, g = value_and_vjp(_outer(dyn, outer), dyn.inputs(trace.final, lam), 1.0)
    return HyperGrad(FlatVector(g.values[dyn.n_state:], lam.layout), "approx", trace.horizon, float(value))


def _identity_block(n: int, cols: slice) -> np.ndarray:
    block = np.zeros((cols.stop - cols.start, n))
    block[np.arange(cols.stop - cols.start), np.arange(cols.start, cols.stop)] = 1.0
    return block


def forward_hypergrad(spec: DynamicsSpec, lam: FlatVector, problem: BilevelProblem,
                      outer: Tape | None = None, directions=None,
                      dynamics: Dynamics | None = None) -> HyperGrad:
    """Hypergradient by forward tangent propagation.

    ``directions`` is an optional ``(k, n_lam)`` array; the result then holds
    the ``k`` directional derivatives instead of the full gradient.  The full
    gradient propagates the identity in chunks of :data:`TANGENT_CHUNK`
    columns, sharing one evaluation of each transition across chunks.
    """
    dyn = dynamics if dynamics is not None else Dynamics(spec, problem)
    problem.check_hyperparams(lam)
    n = lam.layout.size
    if directions is None:
        seeds = [_identity_block(n, slice(i, min(i + TANGENT_CHUNK, n))) for i in range(0, n, TANGENT_CHUNK)]
    else:
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        if directions.shape[1] != n:
            raise PreconditionError(f"directions must have {n} columns")
        seeds = [directions[i:i + TANGENT_CHUNK] for i in range(0, directions.shape[0], TANGENT_CHUNK)]

    init_work = dyn.init_tape.evaluate(lam)
    state = FlatVector(init_work[dyn.init_tape.output], dyn.state_layout)
    Z = [push_tangents(dyn.init_tape, init_work, e) for e in seeds]
    for t in range(1, spec.horizon + 1):
        tape = dyn.transition_tape(dyn.schedule[t - 1])
        work = tape.evaluate(dyn.inputs(state, lam))
        Z = [push_tangents(tape, work, np.hstack([z, e])) for z, e in zip(Z, seeds)]
        new = work[tape.output]
        check_divergence(new[: problem.weight_layout.size], t)
        state = FlatVector(new, dyn.state_layout)

    out_tape = _outer(dyn, outer)
    out_work = out_tape.evaluate(dyn.inputs(state, lam))
    parts = [push_tangents(out_tape, out_work, np.hstack([z, e]))[:, 0] for z, e in zip(Z, seeds)]
    result = np.concatenate(parts) if parts else np.zeros(0)
    value = float(out_work[out_tape.output])
    if directions is None:
        return HyperGrad(FlatVector(result, lam.layout), "forward", spec.horizon, value)
    return HyperGrad(FlatVector(result, Layout([("directions", (len(result),))])), "forward", spec.horizon, value)


def outer_value(spec: DynamicsSpec, lam: FlatVector, problem: BilevelProblem, outer: Tape | None = None,
                dynamics: Dynamics | None = None) -> float:
    """``f(lam)`` by plain forward evaluation, without recording a trace."""
    dyn = dynamics if dynamics is not None else Dynamics(spec, problem)
    state = dyn.initial_state(lam)
    for t in range(1, spec.horizon + 1):
        state = dyn.step(state, lam, t)
    tape = _outer(dyn, outer)
    return float(tape.evaluate(dyn.inputs(state, lam))[tape.output])


class GradientStep:
    """Plain outer update ``lam - lr * g``."""

    def __init__(self, lr: float):
        self.lr = lr

    def __call__(self, lam: FlatVector, grad: FlatVector) -> FlatVector:
        return lam.with_values(lam.values - self.lr * grad.values)


@dataclass
class RTHOResult:
    lambdas: list
    partial_values: list
    final_value: float
    final_weights: FlatVector


def rtho_partial(spec: DynamicsSpec, lam: FlatVector, problem: BilevelProblem, interval: int,
                 outer_step: Callable[[FlatVector, FlatVector], FlatVector] | None = None,
                 outer: Tape | None = None) -> RTHOResult:
    """Online hyperparameter updates from partial forward-mode hypergradients.

    Every ``interval`` inner steps the partial hypergradient
    ``dE(s_t, lam)/dlam = dE/dlam + dE/ds_t . Z_t`` is formed from the running
    tangents and ``outer_step`` updates ``lam``.  Tangents are carried across
    updates rather than reset.
    """
    if interval < 1 or spec.horizon % interval:
        raise PreconditionError("interval must be a positive divisor of the horizon")
    outer_step = outer_step if outer_step is not None else GradientStep(0.1)
    dyn = Dynamics(spec, problem)
    out_tape = _outer(dyn, outer)
    n = lam.layout.size
    eye = np.eye(n)
    work = dyn.init_tape.evaluate(lam)
    state = FlatVector(work[dyn.init_tape.output], dyn.state_layout)
    Z = push_tangents(dyn.init_tape, work, eye)
    lambdas, values = [lam], []
    for t in range(1, spec.horizon + 1):
        tape = dyn.transition_tape(dyn.schedule[t - 1])
        work = tape.evaluate(dyn.inputs(state, lam))
        Z = push_tangents(tape, work, np.hstack([Z, eye]))
        new = work[tape.output]
        check_divergence(new[: problem.weight_layout.size], t)
        state = FlatVector(new, dyn.state_layout)
        if t % interval == 0:
            value, g = value_and_vjp(out_tape, dyn.inputs(state, lam), 1.0)
            partial = g.values[dyn.n_state:] + Z @ g.values[: dyn.n_state]
            values.append(float(value))
            lam = outer_step(lam, FlatVector(partial, lam.layout))
            if not isinstance(lam, FlatVector) or not np.all(np.isfinite(lam.values)):
                raise NumericError("outer update produced non-finite hyperparameters")
            lambdas.append(lam)
    final = float(out_tape.evaluate(dyn.inputs(state, lam))[out_tape.output])
    return RTHOResult(lambdas, values, final, dyn.weights(state))


@dataclass
class FDReport:
    max_rel_error: float
    group_errors: dict
    analytic: np.ndarray
    numeric: np.ndarray
    coords: np.ndarray

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def relative_errors(analytic, numeric, floor_ratio=1e-4) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_ratio`` times the largest magnitude, so coordinates
    that are many orders below the bulk are judged on an absolute scale.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    floor = max(floor_ratio * scale, np.finfo(float).tiny)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_diff_check(problem: BilevelProblem, lam: FlatVector, eps: float, spec: DynamicsSpec,
                      outer: Tape | None = None, coords=None, grad: HyperGrad | None = None) -> FDReport:
    """Compare the reverse-mode hypergradient with central differences.

    ``coords`` restricts the check to a subset of coordinates (all by default).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise PreconditionError("eps must lie in [1e-7, 1e-3]")
    dyn = Dynamics(spec, problem)
    if grad is None:
        grad = reverse_hypergrad(unroll(spec, lam, problem, dynamics=dyn), outer, lam)
    coords = np.arange(lam.layout.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(coords.size)
    for k, i in enumerate(coords):
        plus, minus = lam.values.copy(), lam.values.copy()
        plus[i] += eps
        minus[i] -= eps
        f_plus = outer_value(spec, lam.with_values(plus), problem, outer, dyn)
        f_minus = outer_value(spec, lam.with_values(minus), problem, outer, dyn)
        numeric[k] = (f_plus - f_minus) / (2.0 * eps)
    analytic = grad.values[coords]
    errors = relative_errors(analytic, numeric)
    group_errors = {}
    for name in lam.layout:
        sl = lam.layout.slice(name)
        mask = (coords >= sl.start) & (coords < sl.stop)
        if mask.any():
            group_errors[name] = float(errors[mask].max())
    return FDReport(float(errors.max(initial=0.0)), group_errors, analytic, numeric, coords)


@dataclass
class TuningResult:
    lam: FlatVector
    trajectory: list  # (inner or outer iteration, objective value, hyperparameters after the update)
    final_value: float


def tune_hyperparams(spec: DynamicsSpec, lam: FlatVector, problem: BilevelProblem, method: str = "rtho",
                     interval: int | None = None, outer_lr: float = 1.0, outer_steps: int = 10) -> TuningResult:
    """Gradient descent on the hyperparameters.

    ``rtho`` updates online every ``interval`` inner steps within a single
    run; ``full`` takes ``outer_steps`` reverse-mode hypergradient steps,
    each over a complete unroll.
    """
    step = GradientStep(outer_lr)
    if method == "rtho":
        interval = spec.horizon if interval is None else interval
        res = rtho_partial(spec, lam, problem, interval, step)
        traj = [(k * interval, v, l) for k, (v, l) in enumerate(zip(res.partial_values, res.lambdas[1:]), start=1)]
        return TuningResult(res.lambdas[-1], traj, res.final_value)
    if method != "full":
        raise ConfigurationError(f"unknown tuning method {method!r}")
    traj = []
    for k in range(1, outer_steps + 1):
        g = reverse_hypergrad(unroll(spec, lam, problem), None, lam)
        lam = step(lam, g.grad)
        traj.append((k, g.value, lam))
    return TuningResult(lam, traj, outer_value(spec, lam, problem))
