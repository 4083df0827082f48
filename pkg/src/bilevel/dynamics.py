"""Inner optimisation dynamics as explicit state-transition maps.

The state is ``s = (w, v)``: ground weights plus, for momentum, one velocity
group per weight group (named ``vel.<group>``).  :class:`Dynamics` compiles
the initialisation map and one transition tape per minibatch, and
:func:`unroll` runs them for ``horizon`` steps, recording a :class:`Trace`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .diffgraph import FlatVector, Layout, Tape, TapeBuilder
from .exceptions import ConfigurationError, DivergenceError, NumericError, PreconditionError, ShapeError
from .problems import LOG_STEP, MOMENTUM, BilevelProblem

VELOCITY_PREFIX = "vel."
DIVERGENCE_NORM = 1e8


@dataclass(frozen=True)
class DynamicsSpec:
    """How the inner problem is optimised.

    ``step_size=None`` reads the step size from the ``log_step``
    hyperparameter; ``momentum=None`` (SGDM only) reads it from the
    ``momentum`` logit.  ``batch_size=None`` means full batch, otherwise
    minibatches are visited round-robin in an order fixed by ``seed``.
    """

    kind: str = "GD"
    horizon: int = 10
    step_size: float | None = None
    momentum: float | None = 0.0
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("GD", "SGDM"):
            raise ConfigurationError(f"unknown dynamics kind {self.kind!r}")
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise ConfigurationError("horizon must be a non-negative integer")
        if self.step_size is not None and not (np.isfinite(self.step_size) and self.step_size >= 0):
            raise ConfigurationError("fixed step size must be finite and non-negative")
        if self.kind == "SGDM" and self.momentum is not None and not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")

    def replace(self, **changes) -> "DynamicsSpec":
        return replace(self, **changes)


@dataclass
class DynState:
    w: FlatVector
    v: FlatVector

    def as_vector(self) -> FlatVector:
        vel = FlatVector(self.v.values, Layout([(VELOCITY_PREFIX + n, s) for n, s in self.v.layout.items()]))
        return FlatVector.concat(self.w, vel)


def gd_step(w: FlatVector, grad: FlatVector, eta: float) -> FlatVector:
    """``w - eta * grad``."""
    if eta < 0:
        raise PreconditionError("step size must be non-negative")
    if grad.layout.size != w.layout.size:
        raise ShapeError("gradient and weights differ in size")
    return w.with_values(w.values - eta * grad.values)


def sgdm_step(state: DynState, grad: FlatVector, eta: float, mu: float) -> DynState:
    """Heavy-ball step: ``v' = mu v + grad``, ``w' = w - eta v'``."""
    if grad.layout.size != state.w.layout.size or state.v.layout.size != state.w.layout.size:
        raise ShapeError("state and gradient differ in size")
    v = state.v.values * mu + grad.values
    return DynState(state.w.with_values(state.w.values - eta * v), state.v.with_values(v))


class Dynamics:
    """Compiled dynamics of one problem under one :class:`DynamicsSpec`.

    Tape inputs are the state groups followed by the hyperparameter groups,
    so VJPs split into a state part and a hyperparameter part by position.
    """

    def __init__(self, spec: DynamicsSpec, problem: BilevelProblem):
        self.spec = spec
        self.problem = problem
        weights = list(problem.weight_layout.items())
        if spec.kind == "SGDM":
            weights += [(VELOCITY_PREFIX + n, s) for n, s in problem.weight_layout.items()]
        self.state_layout = Layout(weights)
        self.hyper_layout = problem.hyper_layout
        clash = set(self.state_layout) & set(self.hyper_layout)
        if clash:
            raise ConfigurationError(f"state and hyperparameter groups overlap: {sorted(clash)}")
        if spec.step_size is None and LOG_STEP not in self.hyper_layout:
            raise ConfigurationError("learned step size needs a 'log_step' hyperparameter group")
        if spec.kind == "SGDM" and spec.momentum is None and MOMENTUM not in self.hyper_layout:
            raise ConfigurationError("learned momentum needs a 'momentum' hyperparameter group")
        self.batches = problem.minibatches(spec.batch_size, spec.seed)
        self.schedule = [(t - 1) % len(self.batches) for t in range(1, spec.horizon + 1)]
        self._transitions: dict[int, Tape] = {}
        self._init_tape: Tape | None = None
        self._outer_tape: Tape | None = None

    @property
    def n_state(self) -> int:
        return self.state_layout.size

    def inputs(self, state: FlatVector, lam: FlatVector) -> dict[str, np.ndarray]:
        values = dict(zip(self.state_layout, (state.values[self.state_layout.slice(n)].reshape(s)
                                              for n, s in self.state_layout.items())))
        values.update(lam.groups())
        return values

    def _split_weights(self, state_vars):
        w = {n: state_vars[n] for n in self.problem.weight_layout}
        v = {n: state_vars[VELOCITY_PREFIX + n] for n in self.problem.weight_layout} if self.spec.kind == "SGDM" else {}
        return w, v

    @property
    def init_tape(self) -> Tape:
        if self._init_tape is None:
            tb = TapeBuilder()
            lam = tb.inputs(self.hyper_layout)
            w0 = self.problem.build_init(tb, lam)
            parts = [w0[n] for n in self.problem.weight_layout]
            if self.spec.kind == "SGDM":
                parts += [tb.const(np.zeros(s)) for _, s in self.problem.weight_layout.items()]
            self._init_tape = tb.build(tb.concat(*parts))
        return self._init_tape

    def transition_tape(self, batch_id: int) -> Tape:
        tape = self._transitions.get(batch_id)
        if tape is None:
            tb = TapeBuilder()
            state = tb.inputs(self.state_layout)
            lam = tb.inputs(self.hyper_layout)
            w, v = self._split_weights(state)
            grad = self.problem.build_inner_grad(tb, w, lam, self.batches[batch_id])
            eta = tb.exp(lam[LOG_STEP]) if self.spec.step_size is None else self.spec.step_size
            names = list(self.problem.weight_layout)
            if self.spec.kind == "GD":
                parts = [w[n] - eta * grad[n] for n in names]
            else:
                mu = tb.sigmoid(lam[MOMENTUM]) if self.spec.momentum is None else self.spec.momentum
                vel = {n: mu * v[n] + grad[n] for n in names}
                parts = [w[n] - eta * vel[n] for n in names] + [vel[n] for n in names]
            tape = tb.build(tb.concat(*parts))
            self._transitions[batch_id] = tape
        return tape

    @property
    def outer_tape(self) -> Tape:
        if self._outer_tape is None:
            self._outer_tape = self.outer_tape_for(self.problem.build_outer)
        return self._outer_tape

    def outer_tape_for(self, build_outer) -> Tape:
        """Tape of ``build_outer(tb, w, lam)`` over the state and hyperparameter slots."""
        tb = TapeBuilder()
        state = tb.inputs(self.state_layout)
        lam = tb.inputs(self.hyper_layout)
        w, _ = self._split_weights(state)
        return tb.build(build_outer(tb, w, lam))

    def initial_state(self, lam: FlatVector) -> FlatVector:
        work = self.init_tape.evaluate(lam)
        return FlatVector(work[self.init_tape.output], self.state_layout)

    def step(self, state: FlatVector, lam: FlatVector, t: int) -> FlatVector:
        """Apply transition ``t`` (1-based)."""
        tape = self.transition_tape(self.schedule[t - 1])
        try:
            work = tape.evaluate(self.inputs(state, lam))
        except NumericError as exc:
            raise DivergenceError(f"inner dynamics produced non-finite values at step {t}", t) from exc
        new = work[tape.output]
        check_divergence(new[: self.problem.weight_layout.size], t)
        return FlatVector(new, self.state_layout)

    def weights(self, state: FlatVector) -> FlatVector:
        return state.select(self.problem.weight_layout)


def check_divergence(w: np.ndarray, t: int) -> None:
    norm = float(np.linalg.norm(w))
    if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise DivergenceError(f"inner dynamics diverged at step {t} (|w| = {norm:.3g})", t)


def schedule_hash(seed: int, step_inputs, lam: FlatVector) -> str:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    h.update(np.asarray(step_inputs, dtype=np.int64).tobytes())
    h.update(repr(lam.layout).encode())
    h.update(np.ascontiguousarray(lam.values).tobytes())
    return h.hexdigest()


@dataclass
class Trace:
    """States ``s_0 ... s_T`` of one unrolled run."""

    states: list[FlatVector]
    step_inputs: list[int]
    horizon: int
    schedule_hash: str
    dynamics: Dynamics = field(repr=False)

    def __post_init__(self):
        if len(self.states) != self.horizon + 1:
            raise ShapeError("a trace holds horizon + 1 states")

    @property
    def final(self) -> FlatVector:
        return self.states[-1]

    @property
    def final_weights(self) -> FlatVector:
        return self.dynamics.weights(self.states[-1])

    def replay(self, lam: FlatVector) -> FlatVector:
        state = self.dynamics.initial_state(lam)
        for t in range(1, self.horizon + 1):
            state = self.dynamics.step(state, lam, t)
        return state


def unroll(spec: DynamicsSpec, lam: FlatVector, problem: BilevelProblem, dynamics: Dynamics | None = None) -> Trace:
    """Run ``spec.horizon`` transitions from ``Phi_0(lam)`` and record every state."""
    dyn = dynamics if dynamics is not None else Dynamics(spec, problem)
    problem.check_hyperparams(lam)
    state = dyn.initial_state(lam)
    states = [state]
    for t in range(1, spec.horizon + 1):
        state = dyn.step(state, lam, t)
        states.append(state)
    return Trace(states, list(dyn.schedule), spec.horizon, schedule_hash(spec.seed, dyn.schedule, lam), dyn)
