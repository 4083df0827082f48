"""scikit-learn compatible wrappers around the functional core.

* :class:`HyperRepresentation` - meta-learns a shared feature map from a
  labelled pool of many classes (``fit``) and applies it (``transform``).
* :class:`FewShotClassifier` - the ground model: a few gradient steps of
  multinomial logistic regression from zero, on raw or learned features.
* :class:`BilevelLogisticRegression` - logistic regression whose step size
  is tuned by hypergradients on a held-out split.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .data import ExamplePool, MetaDataset
from .dynamics import DynamicsSpec, unroll
from .hypergrad import tune_hyperparams
from .meta import MetaConfig, ReprModel, train_meta
from .optim import Adam
from .problems import Dataset, LogisticHOProblem, SplitDataset, logistic_logits


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit_ground(Z, y_enc, n_classes, horizon, step_size):
    """Weights after ``horizon`` full-batch gradient steps from zero."""
    empty = Dataset(np.zeros((0, Z.shape[1])), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    prob = LogisticHOProblem(SplitDataset(Dataset(Z, y_enc), empty, allow_empty_val=True), n_classes)
    lam = prob.hyperparams(step=step_size)
    return unroll(DynamicsSpec(horizon=horizon), lam, prob).final_weights.groups()


class _LogisticOutputMixin:
    """Prediction methods shared by the estimators that hold ``coef_`` and ``intercept_``."""

    def _encode_targets(self, X, y):
        X, y = validate_data(self, X, y)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError(f"need at least two classes; got 1 class ({self.classes_[0]!r})")
        return X, y_enc

    def _features(self, X):
        return X

    def _logits(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, reset=False)
        return logistic_logits({"W": self.coef_, "b": self.intercept_}, self._features(X))

    def decision_function(self, X):
        logits = self._logits(X)
        # binary convention: one score, positive favours classes_[1]
        return logits[:, 1] - logits[:, 0] if len(self.classes_) == 2 else logits

    def predict_proba(self, X):
        return _softmax(self._logits(X))

    def predict(self, X):
        logits = self._logits(X)
        # argmax returns the first maximum, so ties go to the lowest class index
        return self.classes_[np.argmax(logits, axis=1)]


class HyperRepresentation(TransformerMixin, BaseEstimator):
    """Feature map meta-learned so that few-step logistic regression on top generalises.

    ``fit`` splits the classes of ``y`` into a training pool and a validation
    pool (``validation_fraction`` of the classes), samples ``n_way``-way
    ``k_shot``-shot episodes from each, and runs the outer Adam loop with
    early stopping.  After fitting, ``lam_`` holds the hyperparameters and
    ``step_size_`` the learned inner step size.
    """

    def __init__(self, hidden=(), output_dim=32, horizon=5, variant="full", n_way=5, k_shot=1,
                 val_per_class=15, max_iter=1500, meta_batch=4, learning_rate=1e-3, lr_decay=0.97,
                 eval_interval=50, eval_episodes=100, patience=10, validation_fraction=0.2, random_state=0):
        self.hidden = hidden
        self.output_dim = output_dim
        self.horizon = horizon
        self.variant = variant
        self.n_way = n_way
        self.k_shot = k_shot
        self.val_per_class = val_per_class
        self.max_iter = max_iter
        self.meta_batch = meta_batch
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.eval_interval = eval_interval
        self.eval_episodes = eval_episodes
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = validate_data(self, X, y)
        check_classification_targets(y)
        classes, y_enc = np.unique(y, return_inverse=True)
        need = self.k_shot + self.val_per_class
        counts = np.bincount(y_enc)
        if counts.min() < need:
            raise ValueError(f"every class needs at least {need} examples; the smallest has {counts.min()}")
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(classes))
        n_val = max(self.n_way, int(round(self.validation_fraction * len(classes))))
        if len(classes) - n_val < self.n_way:
            raise ValueError(f"need at least {2 * self.n_way} classes to form training and validation pools")
        pool = ExamplePool(X, y_enc)
        seed = int(rng.integers(2**31))
        sets = {role: MetaDataset(pool, role, np.sort(idx), seed, self.n_way, self.k_shot, self.val_per_class)
                for role, idx in (("meta_train", order[n_val:]), ("meta_val", order[:n_val]))}
        config = MetaConfig(ReprModel(X.shape[1], tuple(self.hidden), self.output_dim), self.n_way)
        run = train_meta(sets["meta_train"], sets["meta_val"], config.init_hyperparams(self.random_state),
                         DynamicsSpec(horizon=self.horizon), config, Adam(self.learning_rate, decay=self.lr_decay),
                         self.variant, self.max_iter, self.meta_batch, self.eval_interval, self.eval_episodes,
                         self.patience)
        self.meta_config_ = config
        self.lam_ = run.best
        self.step_size_ = run.best.step_size
        self.history_ = run.history
        self.best_score_ = run.best_acc
        return self

    def transform(self, X):
        check_is_fitted(self, "lam_")
        X = validate_data(self, X, reset=False)
        return self.meta_config_.model.forward(X, self.lam_)


class FewShotClassifier(_LogisticOutputMixin, ClassifierMixin, BaseEstimator):
    """Logistic regression trained by ``horizon`` gradient steps from zero weights.

    With a fitted ``representation`` the features are its output and the
    step size defaults to the one it learned; otherwise raw features and
    ``step_size`` (0.1 when unset) are used.
    """

    def __init__(self, representation=None, horizon=5, step_size=None):
        self.representation = representation
        self.horizon = horizon
        self.step_size = step_size

    def _features(self, X):
        return X if self.representation is None else self.representation.transform(X)

    def fit(self, X, y):
        X, y_enc = self._encode_targets(X, y)
        eta = self.step_size
        if eta is None:
            eta = 0.1 if self.representation is None else self.representation.step_size_
        w = _fit_ground(self._features(X), y_enc, len(self.classes_), self.horizon, eta)
        self.coef_, self.intercept_ = w["W"], w["b"]
        return self


class BilevelLogisticRegression(_LogisticOutputMixin, ClassifierMixin, BaseEstimator):
    """Logistic regression whose SGD step size is tuned on a held-out split.

    ``fit`` holds out ``validation_fraction`` of the rows (stratified),
    tunes ``log(step)`` by online (``rtho``) or full hypergradient descent
    on the validation cross entropy, and keeps the weights the tuned
    dynamics produce on the training rows.
    """

    def __init__(self, horizon=40, interval=10, init_step=float(np.exp(-2.0)), method="rtho", outer_lr=5.0,
                 outer_steps=10, batch_size=10, validation_fraction=0.3, random_state=0):
        self.horizon = horizon
        self.interval = interval
        self.init_step = init_step
        self.method = method
        self.outer_lr = outer_lr
        self.outer_steps = outer_steps
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y_enc = self._encode_targets(X, y)
        idx = np.arange(len(y_enc))
        tr, va = train_test_split(idx, test_size=self.validation_fraction, stratify=y_enc,
                                  random_state=self.random_state)
        data = SplitDataset(Dataset(X[tr], y_enc[tr], tr), Dataset(X[va], y_enc[va], va))
        prob = LogisticHOProblem(data, len(self.classes_))
        spec = DynamicsSpec(horizon=self.horizon, batch_size=self.batch_size, seed=self.random_state)
        tuned = tune_hyperparams(spec, prob.hyperparams(step=self.init_step), prob, self.method, self.interval,
                                 self.outer_lr, self.outer_steps)
        w = unroll(spec, tuned.lam, prob).final_weights.groups()
        self.step_size_ = tuned.lam.step_size
        self.val_loss_ = tuned.final_value
        self.coef_, self.intercept_ = w["W"], w["b"]
        return self
