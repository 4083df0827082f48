"""Inner and outer objectives.

Plain numpy loss functions (``cross_entropy``, ``mse``, ``inner_loss``,
``outer_loss_validation``, ``accuracy``) plus the :class:`BilevelProblem`
family, which expresses the same objectives as tapes so that the unrolled
dynamics can be differentiated.

A problem supplies three tape fragments:

* ``build_init``       - initial ground weights as a function of the hyperparameters
* ``build_inner_grad`` - gradient of the inner loss w.r.t. the ground weights,
                         written out in closed form so its own derivatives
                         (Hessian products) come from plain VJP/JVP passes
* ``build_outer``      - the outer (validation) loss
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .diffgraph import FlatVector, Layout, TapeBuilder, Var
from .exceptions import ConfigurationError, PreconditionError, ShapeError

LOG_STEP = "log_step"
REG_STRENGTH = "reg_strength"
MOMENTUM = "momentum"
INIT_PREFIX = "init."
REPR_PREFIX = "repr."


class HyperParams(FlatVector):
    """Outer variables as named groups of one flat vector.

    Recognised groups: ``repr.*`` (representation weights), ``log_step``
    (step size is ``exp(log_step)``), ``init.*`` (learned initial weights),
    ``reg_strength`` (regulariser is ``exp(reg_strength)``) and ``momentum``
    (a logit; the momentum factor is ``sigmoid(momentum)``).
    """

    __slots__ = ()

    @classmethod
    def from_groups(cls, groups) -> "HyperParams":
        fv = FlatVector.from_groups(groups)
        return cls(fv.values, fv.layout)

    @classmethod
    def from_vector(cls, fv: FlatVector) -> "HyperParams":
        return cls(fv.values, fv.layout)

    def with_values(self, values) -> "HyperParams":
        return HyperParams(values, self.layout)

    def updated(self, groups) -> "HyperParams":
        return HyperParams.from_vector(FlatVector.updated(self, groups))

    def copy(self) -> "HyperParams":
        return HyperParams(self.values.copy(), self.layout)

    @property
    def step_size(self) -> float:
        return float(np.exp(self.group(LOG_STEP)))

    @property
    def has_regularizer(self) -> bool:
        return REG_STRENGTH in self.layout


# ---------------------------------------------------------------------------
# data containers


class LabelledExample(NamedTuple):
    x: np.ndarray
    y: int | float


@dataclass
class Dataset:
    """Rows of features with labels; ``ids`` identify examples across splits."""

    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y)
        if self.X.shape[0] != self.y.shape[0]:
            raise ShapeError(f"{self.X.shape[0]} feature rows but {self.y.shape[0]} labels")
        if self.ids is None:
            self.ids = np.arange(self.X.shape[0])
        self.ids = np.asarray(self.ids)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __iter__(self) -> Iterator[LabelledExample]:
        for x, y in zip(self.X, self.y):
            yield LabelledExample(x, y.item())

    def subset(self, index) -> "Dataset":
        return Dataset(self.X[index], self.y[index], self.ids[index])


@dataclass
class SplitDataset:
    """Training and validation parts of one dataset; they may not share examples."""

    train: Dataset
    val: Dataset
    allow_empty_val: bool = False

    def __post_init__(self):
        if len(self.train) == 0:
            raise ConfigurationError("training split is empty")
        if len(self.val) == 0 and not self.allow_empty_val:
            raise ConfigurationError("validation split is empty")
        if np.intersect1d(self.train.ids, self.val.ids).size:
            raise ConfigurationError("training and validation splits share examples")


# ---------------------------------------------------------------------------
# numpy losses


def cross_entropy(logits, y):
    """``-log softmax(logits)[y]``; per row when ``logits`` is a matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise PreconditionError("cross entropy needs at least two classes")
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= logits.shape[-1]):
        raise PreconditionError(f"class index out of range for {logits.shape[-1]} classes")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, y.astype(np.int64)[..., None], axis=-1)[..., 0]
    return log_norm - picked


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def logistic_logits(weights, Z):
    """Multinomial logistic scores for rows of ``Z``; ``weights`` holds ``W`` and ``b``."""
    return np.asarray(Z) @ np.asarray(weights["W"]).T + np.asarray(weights["b"])


def _weight_groups(w):
    return w.groups() if isinstance(w, FlatVector) else dict(w)


def inner_loss(lam, w, batch: Dataset, features=None) -> float:
    """Mean cross entropy of the logistic ground model plus the learned L2 term.

    The regulariser ``exp(reg_strength) * ||w||^2`` is skipped when ``lam``
    has no ``reg_strength`` group or it is ``-inf``.
    """
    if len(batch) == 0:
        raise PreconditionError("inner loss needs a non-empty batch")
    weights = _weight_groups(w)
    Z = batch.X if features is None else features(batch.X)
    loss = float(np.mean(cross_entropy(logistic_logits(weights, Z), batch.y)))
    reg = None
    if isinstance(lam, FlatVector) and REG_STRENGTH in lam.layout:
        reg = float(lam.group(REG_STRENGTH))
    elif isinstance(lam, dict) and REG_STRENGTH in lam:
        reg = float(lam[REG_STRENGTH])
    if reg is not None and np.isfinite(reg):
        loss += float(np.exp(reg)) * sum(float(np.sum(np.square(v))) for v in weights.values())
    return loss


def outer_loss_validation(w_T, lam, val: Dataset, features=None) -> float:
    """Mean validation cross entropy of the trained ground model."""
    if len(val) == 0:
        raise PreconditionError("validation set is empty")
    Z = val.X if features is None else features(val.X)
    return float(np.mean(cross_entropy(logistic_logits(_weight_groups(w_T), Z), val.y)))


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches; ties go to the lowest class index."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if logits.shape[0] == 0:
        raise PreconditionError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------------------
# tape fragments


def logits_tape(tb: TapeBuilder, Z, W: Var, b: Var) -> Var:
    return Z @ W.T + b


def cross_entropy_tape(tb: TapeBuilder, logits: Var, y) -> Var:
    return -tb.mean(tb.gather(tb.log_softmax(logits), y))


def logistic_grad_tape(tb: TapeBuilder, Z, W: Var, b: Var, y, n_classes: int) -> tuple[Var, Var]:
    """Closed-form gradient of the mean cross entropy w.r.t. ``(W, b)``."""
    y = np.asarray(y, dtype=np.int64)
    onehot = np.eye(n_classes)[y]
    resid = (tb.softmax(logits_tape(tb, Z, W, b)) - onehot) * (1.0 / len(y))
    Zt = Z.T if isinstance(Z, Var) else tb.const(np.asarray(Z).T)
    return (Zt @ resid).T, tb.sum(resid, axis=0)


def _reg_coefficient(tb, lam):
    if REG_STRENGTH in lam:
        return tb.exp(lam[REG_STRENGTH])
    return None


# ---------------------------------------------------------------------------
# problems


class BilevelProblem:
    """Base class for inner/outer objective pairs.

    Subclasses define ``hyper_layout``, ``weight_layout`` and the tape
    fragments.  ``learned_init`` selects between zero initial weights and
    the ``init.<group>`` hyperparameters.
    """

    hyper_layout: Layout
    weight_layout: Layout
    learned_init: bool = False
    n_train: int = 1

    def check_hyperparams(self, lam: FlatVector) -> None:
        if lam.layout != self.hyper_layout:
            raise ConfigurationError(f"hyperparameters {lam.layout!r} do not match {self.hyper_layout!r}")

    def build_init(self, tb: TapeBuilder, lam: dict[str, Var]) -> dict[str, Var]:
        if self.learned_init:
            return {name: lam[INIT_PREFIX + name] for name in self.weight_layout}
        return {name: tb.const(np.zeros(shape)) for name, shape in self.weight_layout.items()}

    def build_inner_grad(self, tb: TapeBuilder, w: dict[str, Var], lam: dict[str, Var], batch) -> dict[str, Var]:
        raise NotImplementedError

    def build_outer(self, tb: TapeBuilder, w: dict[str, Var], lam: dict[str, Var]) -> Var:
        raise NotImplementedError

    def inner_loss_value(self, w, lam, batch=None) -> float:
        raise NotImplementedError

    def minibatches(self, batch_size: int | None, seed: int = 0) -> list:
        """Index arrays of the round-robin schedule, or ``[None]`` for full batch."""
        if batch_size is None or batch_size >= self.n_train:
            return [None]
        order = np.random.default_rng(seed).permutation(self.n_train)
        n = self.n_train // batch_size
        return [np.sort(order[i * batch_size:(i + 1) * batch_size]) for i in range(n)]

    def init_layout_groups(self) -> list[tuple[str, tuple]]:
        return [(INIT_PREFIX + name, shape) for name, shape in self.weight_layout.items()]


class QuadraticProblem(BilevelProblem):
    """``L(w) = 1/2 ||w - target||^2`` with ``E(w) = 1/2 ||w - val_target||^2``.

    ``target`` is the hyperparameter group ``"target"``; the outer loss has no
    explicit dependence on it unless ``explicit_penalty`` adds
    ``1/2 ||lam_target||^2``.
    """

    def __init__(self, dim=1, val_target=None, learned_step=True, learned_init=False,
                 explicit_penalty=False, learned_target=True, fixed_target=0.0):
        self.dim = int(dim)
        self.val_target = np.zeros(self.dim) if val_target is None else np.asarray(val_target, float).reshape(self.dim)
        self.learned_init = learned_init
        self.explicit_penalty = explicit_penalty
        self.learned_target = learned_target
        self.weight_layout = Layout([("w", (self.dim,))])
        groups = []
        if learned_target:
            groups.append(("target", (self.dim,)))
        if learned_step:
            groups.append((LOG_STEP, ()))
        if learned_init:
            groups.extend(self.init_layout_groups())
        self.hyper_layout = Layout(groups)
        self.fixed_target = np.broadcast_to(np.asarray(fixed_target, float), (self.dim,)).copy()

    def hyperparams(self, target=0.0, step=None, init=None) -> HyperParams:
        groups = {}
        if self.learned_target:
            groups["target"] = np.broadcast_to(np.asarray(target, float), (self.dim,))
        if LOG_STEP in self.hyper_layout:
            groups[LOG_STEP] = np.log(step if step is not None else 0.1)
        if self.learned_init:
            groups[INIT_PREFIX + "w"] = np.broadcast_to(np.asarray(0.0 if init is None else init, float), (self.dim,))
        return HyperParams.from_groups(groups)

    def _target(self, tb, lam):
        return lam["target"] if self.learned_target else tb.const(self.fixed_target)

    def build_inner_grad(self, tb, w, lam, batch):
        return {"w": w["w"] - self._target(tb, lam)}

    def build_outer(self, tb, w, lam):
        diff = w["w"] - self.val_target
        out = tb.sum(diff * diff) * 0.5
        if self.explicit_penalty and self.learned_target:
            out = out + tb.sum(lam["target"] * lam["target"]) * 0.5
        return out

    def inner_loss_value(self, w, lam, batch=None):
        target = lam.group("target") if self.learned_target else self.fixed_target
        return 0.5 * float(np.sum((_weight_groups(w)["w"] - target) ** 2))


class LogisticHOProblem(BilevelProblem):
    """Hyperparameter optimisation of a multinomial logistic regression.

    The inner loss is the mean training cross entropy on a minibatch, plus
    ``exp(reg_strength) * ||w||^2`` when that group is present; the outer
    loss is the mean validation cross entropy and does not depend on the
    hyperparameters explicitly.
    """

    def __init__(self, data: SplitDataset, n_classes: int, learned_reg=False, learned_momentum=False):
        self.data = data
        self.n_classes = int(n_classes)
        self.n_train = len(data.train)
        d = data.train.X.shape[1]
        self.weight_layout = Layout([("W", (self.n_classes, d)), ("b", (self.n_classes,))])
        groups = [(LOG_STEP, ())]
        if learned_reg:
            groups.append((REG_STRENGTH, ()))
        if learned_momentum:
            groups.append((MOMENTUM, ()))
        self.hyper_layout = Layout(groups)

    def hyperparams(self, step=0.1, reg=None, momentum=None) -> HyperParams:
        groups = {LOG_STEP: np.log(step)}
        if REG_STRENGTH in self.hyper_layout:
            groups[REG_STRENGTH] = np.log(reg if reg is not None else 1e-3)
        if MOMENTUM in self.hyper_layout:
            mu = 0.5 if momentum is None else momentum
            groups[MOMENTUM] = np.log(mu / (1.0 - mu))
        return HyperParams.from_groups(groups)

    def build_inner_grad(self, tb, w, lam, batch):
        train = self.data.train if batch is None else self.data.train.subset(batch)
        gW, gb = logistic_grad_tape(tb, tb.const(train.X), w["W"], w["b"], train.y, self.n_classes)
        coef = _reg_coefficient(tb, lam)
        if coef is not None:
            gW = gW + coef * w["W"] * 2.0
            gb = gb + coef * w["b"] * 2.0
        return {"W": gW, "b": gb}

    def build_outer(self, tb, w, lam):
        val = self.data.val
        return cross_entropy_tape(tb, logits_tape(tb, tb.const(val.X), w["W"], w["b"]), val.y)

    def inner_loss_value(self, w, lam, batch=None):
        train = self.data.train if batch is None else self.data.train.subset(batch)
        return inner_loss(lam, w, train)

    def outer_value(self, w, lam) -> float:
        return outer_loss_validation(w, lam, self.data.val)
