"""Episodic meta-learning with a shared hyper-representation.

Each episode trains a multinomial logistic ground model on ``h(x, lam)``
for a few gradient steps from zero (or from learned initial weights); the
meta-objective is the mean validation loss over a batch of episodes.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .data import Episode, MetaDataset
from .diffgraph import FlatVector, Layout, TapeBuilder, Var, value_and_vjp
from .dynamics import Dynamics, DynamicsSpec, Trace, unroll
from .exceptions import ConfigurationError, NumericError, PreconditionError
from .optim import Adam
from .hypergrad import HyperGrad, approx_hypergrad, forward_hypergrad, reverse_hypergrad
from .problems import (INIT_PREFIX, LOG_STEP, REG_STRENGTH, REPR_PREFIX, BilevelProblem, HyperParams,
                       accuracy, cross_entropy_tape, inner_loss, logistic_grad_tape, logistic_logits,
                       logits_tape)

VARIANTS = ("full", "approx", "bilevel_train", "classic")


@dataclass(frozen=True)
class ReprModel:
    """Affine layers with ReLU in between; the last layer is linear.

    ``hidden=(32,)`` gives two affine layers ``input -> 32 -> output_dim``.
    """

    input_dim: int
    hidden: tuple = (32,)
    output_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def groups(self) -> list[tuple[str, tuple]]:
        out = []
        for i, (fan_in, fan_out) in enumerate(self.sizes):
            out.append((f"{REPR_PREFIX}{i}.weight", (fan_out, fan_in)))
            out.append((f"{REPR_PREFIX}{i}.bias", (fan_out,)))
        return out

    def init_weights(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
        weights = {}
        for i, (fan_in, fan_out) in enumerate(self.sizes):
            bound = 1.0 / np.sqrt(fan_in)
            weights[f"{REPR_PREFIX}{i}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in))
            weights[f"{REPR_PREFIX}{i}.bias"] = rng.uniform(-bound, bound, fan_out)
        return weights

    def forward(self, X, lam) -> np.ndarray:
        h = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if h.shape[1] != self.input_dim:
            raise ConfigurationError(f"expected {self.input_dim} input features, got {h.shape[1]}")
        n_layers = len(self.sizes)
        for i in range(n_layers):
            h = h @ np.asarray(lam[f"{REPR_PREFIX}{i}.weight"]).T + np.asarray(lam[f"{REPR_PREFIX}{i}.bias"])
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def tape(self, tb: TapeBuilder, X, lam: dict[str, Var]) -> Var:
        h = tb.const(np.asarray(X, dtype=np.float64))
        n_layers = len(self.sizes)
        for i in range(n_layers):
            h = h @ lam[f"{REPR_PREFIX}{i}.weight"].T + lam[f"{REPR_PREFIX}{i}.bias"]
            if i < n_layers - 1:
                h = tb.relu(h)
        return h


def repr_forward(x, lam, model: ReprModel) -> np.ndarray:
    return model.forward(x, lam)


@dataclass(frozen=True)
class MetaConfig:
    """Shape of the meta-learner: representation, episode width and which groups are learned."""

    model: ReprModel
    n_way: int = 5
    learned_init: bool = False
    learned_reg: bool = False

    @property
    def weight_layout(self) -> Layout:
        return Layout([("W", (self.n_way, self.model.output_dim)), ("b", (self.n_way,))])

    @property
    def hyper_layout(self) -> Layout:
        groups = self.model.groups() + [(LOG_STEP, ())]
        if self.learned_init:
            groups += [(INIT_PREFIX + n, s) for n, s in self.weight_layout.items()]
        if self.learned_reg:
            groups.append((REG_STRENGTH, ()))
        return Layout(groups)

    def init_hyperparams(self, seed: int = 0, step: float = 0.1, reg: float = 1e-3) -> HyperParams:
        """Representation drawn with a fixed seed, ``eta = step``, zero learned init."""
        groups = dict(self.model.init_weights(np.random.default_rng(seed)))
        groups[LOG_STEP] = np.log(step)
        if self.learned_init:
            for n, s in self.weight_layout.items():
                groups[INIT_PREFIX + n] = np.zeros(s)
        if self.learned_reg:
            groups[REG_STRENGTH] = np.log(reg)
        return HyperParams.from_groups(groups)

    def problem(self, episode: Episode, outer_on_train: bool = False) -> "EpisodeProblem":
        return EpisodeProblem(episode, self, outer_on_train)


class EpisodeProblem(BilevelProblem):
    """Inner loss on the episode's training split, outer loss on its validation split.

    ``outer_on_train`` redirects the outer loss to the training split.
    """

    def __init__(self, episode: Episode, config: MetaConfig, outer_on_train: bool = False):
        if episode.n_way != config.n_way:
            raise ConfigurationError(f"episode is {episode.n_way}-way, meta-learner expects {config.n_way}")
        self.episode = episode
        self.config = config
        self.outer_on_train = outer_on_train
        self.learned_init = config.learned_init
        self.weight_layout = config.weight_layout
        self.hyper_layout = config.hyper_layout
        self.n_train = len(episode.train)
        self.outer_data = episode.train if outer_on_train else episode.val
        if len(self.outer_data) == 0:
            raise PreconditionError("outer loss needs a non-empty validation split")

    def build_inner_grad(self, tb, w, lam, batch):
        train = self.episode.train if batch is None else self.episode.train.subset(batch)
        Z = self.config.model.tape(tb, train.X, lam)
        gW, gb = logistic_grad_tape(tb, Z, w["W"], w["b"], train.y, self.config.n_way)
        if REG_STRENGTH in lam:
            coef = tb.exp(lam[REG_STRENGTH]) * 2.0
            gW = gW + coef * w["W"]
            gb = gb + coef * w["b"]
        return {"W": gW, "b": gb}

    def build_outer(self, tb, w, lam):
        Z = self.config.model.tape(tb, self.outer_data.X, lam)
        return cross_entropy_tape(tb, logits_tape(tb, Z, w["W"], w["b"]), self.outer_data.y)

    def features(self, lam):
        return lambda X: self.config.model.forward(X, lam)

    def inner_loss_value(self, w, lam, batch=None):
        train = self.episode.train if batch is None else self.episode.train.subset(batch)
        return inner_loss(lam, w, train, features=self.features(lam))


# ---------------------------------------------------------------------------
# per-episode operations


def episode_inner_solve(episode: Episode, lam: FlatVector, spec: DynamicsSpec, config: MetaConfig,
                        outer_on_train: bool = False) -> Trace:
    """Unroll gradient descent on the episode's training split."""
    if spec.kind != "GD":
        raise ConfigurationError("episodes are solved with full-batch gradient descent")
    return unroll(spec, lam, config.problem(episode, outer_on_train))


def _final_weights(episode, lam, spec, config) -> FlatVector:
    dyn = Dynamics(spec, config.problem(episode))
    state = dyn.initial_state(lam)
    for t in range(1, spec.horizon + 1):
        state = dyn.step(state, lam, t)
    return dyn.weights(state)


def episode_accuracy(episode: Episode, lam: FlatVector, spec: DynamicsSpec, config: MetaConfig) -> float:
    """Validation accuracy of the ground model after ``spec.horizon`` steps."""
    w = _final_weights(episode, lam, spec, config)
    logits = logistic_logits(w.groups(), config.model.forward(episode.val.X, lam))
    return accuracy(logits, episode.val.y)


def meta_objective(episodes: list[Episode], lam: FlatVector, spec: DynamicsSpec, config: MetaConfig,
                   outer_on_train: bool = False) -> float:
    """Mean over episodes of the mean validation loss after the inner solve."""
    if not episodes:
        raise PreconditionError("meta objective needs at least one episode")
    total = 0.0
    for ep in episodes:
        problem = config.problem(ep, outer_on_train)
        dyn = Dynamics(spec, problem)
        state = dyn.initial_state(lam)
        for t in range(1, spec.horizon + 1):
            state = dyn.step(state, lam, t)
        tape = dyn.outer_tape
        total += float(tape.evaluate(dyn.inputs(state, lam))[tape.output])
    return total / len(episodes)


def meta_objective_forward(episodes, lam, spec, config, outer_on_train=False) -> float:
    """Same value as :func:`meta_objective`, read off forward-mode passes (independent route)."""
    total = 0.0
    for ep in episodes:
        res = forward_hypergrad(spec, lam, config.problem(ep, outer_on_train),
                                directions=np.zeros((1, lam.layout.size)))
        total += res.value
    return total / len(episodes)


def _classic_grad(episodes, lam, config, weights):
    if weights is None:
        weights = [FlatVector.zeros(config.weight_layout) for _ in episodes]
    if len(weights) != len(episodes):
        raise PreconditionError("classic variant needs one weight vector per episode")
    n = len(episodes)
    dlam = np.zeros(lam.layout.size)
    ground, total = [], 0.0
    for ep, w in zip(episodes, weights):
        problem = config.problem(ep, outer_on_train=True)
        tb = TapeBuilder()
        wv = tb.inputs(config.weight_layout)
        lv = tb.inputs(config.hyper_layout)
        tape = tb.build(problem.build_outer(tb, wv, lv))
        inputs = dict(w.groups())
        inputs.update(lam.groups())
        value, g = value_and_vjp(tape, inputs, 1.0)
        k = config.weight_layout.size
        total += float(value)
        dlam += g.values[k:]
        ground.append(FlatVector(g.values[:k] / n, config.weight_layout))
    return HyperGrad(FlatVector(dlam / n, lam.layout), "classic", 0, total / n, ground)


def meta_grad(episodes: list[Episode], lam: FlatVector, spec: DynamicsSpec, config: MetaConfig,
              variant: str = "full", weights=None) -> HyperGrad:
    """Gradient of the variant's outer objective, averaged over ``episodes`` in order.

    * ``full``          - exact hypergradient, outer loss on validation splits
    * ``approx``        - explicit dependence only (trained weights held fixed)
    * ``bilevel_train`` - exact hypergradient, outer loss on training splits
    * ``classic``       - joint multitask loss on training splits at the given
                          per-episode ``weights``; ``.ground`` holds their gradients
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if not episodes:
        raise PreconditionError("meta gradient needs at least one episode")
    if variant == "classic":
        return _classic_grad(episodes, lam, config, weights)
    outer_on_train = variant == "bilevel_train"
    dlam = np.zeros(lam.layout.size)
    total = 0.0
    for ep in episodes:
        trace = episode_inner_solve(ep, lam, spec, config, outer_on_train)
        hg = approx_hypergrad(trace, None, lam) if variant == "approx" else reverse_hypergrad(trace, None, lam)
        dlam += hg.values
        total += hg.value
    n = len(episodes)
    return HyperGrad(FlatVector(dlam / n, lam.layout), variant, spec.horizon, total / n)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    mean: float
    ci95: float
    accuracies: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.accuracies)


def mean_confidence_interval(accuracies) -> EvalResult:
    """Mean and ``1.96 * sd / sqrt(n)`` half-width, with the ``n - 1`` sample deviation."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        raise PreconditionError("a confidence interval needs at least two episodes")
    # statistics gives exactly representable results for constant accuracies
    sd = statistics.stdev(acc.tolist())
    return EvalResult(statistics.fmean(acc.tolist()), 1.96 * sd / math.sqrt(acc.size), acc)


def evaluate_meta(meta_dataset: MetaDataset, lam: FlatVector, spec: DynamicsSpec, config: MetaConfig,
                  episodes: int, start: int = 0) -> EvalResult:
    """Accuracy over episodes ``start .. start + episodes - 1`` of ``meta_dataset``."""
    if episodes < 2:
        raise PreconditionError("evaluate at least two episodes")
    accs = [episode_accuracy(meta_dataset.episode(i), lam, spec, config) for i in range(start, start + episodes)]
    return mean_confidence_interval(accs)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetaTrainResult:
    best: HyperParams
    best_acc: float
    best_iter: int
    iterations: int
    history: list


def train_meta(train_set: MetaDataset, val_set: MetaDataset, lam: HyperParams, spec: DynamicsSpec,
               config: MetaConfig, optimizer, variant: str = "full", max_iters: int = 1000, meta_batch: int = 4,
               eval_interval: int = 50, eval_episodes: int = 100, patience: int = 10,
               classic_lr: float = 0.01, classic_steps: int = 4, on_eval=None) -> MetaTrainResult:
    """Outer optimisation with early stopping on validation accuracy.

    Iteration ``i`` (1-based) uses training episodes ``(i-1)*meta_batch ..``;
    the classic variant instead keeps each meta-batch for ``classic_steps``
    joint updates of the hyperparameters and per-episode ground weights.
    Validation accuracy is measured before training and every
    ``eval_interval`` iterations; training stops after ``patience``
    evaluations without a strict improvement.  ``on_eval(it, f_batch, result,
    improved, lam)`` is called after every evaluation.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    history = []
    best, best_acc, best_iter, bad = lam, None, 0, 0

    def evaluate(it, f_batch):
        nonlocal best, best_acc, best_iter, bad
        res = evaluate_meta(val_set, lam, spec, config, eval_episodes)
        history.append({"iter": it, "f_train_batch": f_batch, "metaval_acc": res.mean, "metaval_ci": res.ci95})
        improved = best_acc is None or res.mean > best_acc
        if improved:
            best, best_acc, best_iter, bad = lam, res.mean, it, 0
        else:
            bad += 1
        if on_eval is not None:
            on_eval(it, f_batch, res, improved, lam)
        return bad >= patience

    it, stop = 0, evaluate(0, None)
    batch_id, episodes, weights, w_opts = None, None, None, None
    while it < max_iters and not stop:
        it += 1
        if variant == "classic":
            k = (it - 1) // classic_steps
            if k != batch_id:
                batch_id = k
                episodes = train_set.episodes(k * meta_batch, meta_batch)
                weights = [FlatVector.zeros(config.weight_layout) for _ in episodes]
                w_opts = [Adam(classic_lr) for _ in episodes]
            g = meta_grad(episodes, lam, spec, config, "classic", weights)
            weights = [w.with_values(o.step(w.values, gw.values)) for w, o, gw in zip(weights, w_opts, g.ground)]
        else:
            g = meta_grad(train_set.episodes((it - 1) * meta_batch, meta_batch), lam, spec, config, variant)
        if not np.isfinite(g.value):
            raise NumericError(f"non-finite meta-objective at iteration {it}")
        lam = lam.with_values(optimizer.step(lam.values, g.values))
        if it % eval_interval == 0:
            stop = evaluate(it, g.value)
    return MetaTrainResult(best, best_acc, best_iter, it, history)
