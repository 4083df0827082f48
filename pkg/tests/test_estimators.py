import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.estimator_checks import parametrize_with_checks

from bilevel import BilevelLogisticRegression, FewShotClassifier, HyperRepresentation
from bilevel.data import TaskGenerator, TaskGeneratorConfig


@parametrize_with_checks([FewShotClassifier(),
                          BilevelLogisticRegression(horizon=4, interval=2, batch_size=None, outer_steps=1)])
def test_sklearn_conventions(estimator, check):
    check(estimator)


@pytest.fixture(scope="module")
def pool():
    cfg = TaskGeneratorConfig(observed_dim=10, latent_dim=4, num_latent_classes=20, split=(20, 0, 0))
    gen = TaskGenerator(cfg)
    rng = np.random.default_rng(0)
    X = gen.sample(np.arange(20), 20, rng)
    return gen, X, np.repeat(np.arange(20), 20)


@pytest.fixture(scope="module")
def fitted_repr(pool):
    _, X, y = pool
    return HyperRepresentation(output_dim=8, n_way=3, val_per_class=5, max_iter=40, eval_interval=10,
                               eval_episodes=10, learning_rate=1e-2).fit(X[y < 16], y[y < 16])


def test_representation_fit_transform(fitted_repr, pool):
    _, X, _ = pool
    Z = fitted_repr.transform(X[:7])
    assert Z.shape == (7, 8)
    assert fitted_repr.n_features_in_ == 10
    assert fitted_repr.step_size_ > 0
    assert fitted_repr.best_score_ == max(h["metaval_acc"] for h in fitted_repr.history_)
    with pytest.raises(ValueError):
        fitted_repr.transform(X[:2, :5])


def test_representation_params_and_clone(fitted_repr):
    params = fitted_repr.get_params()
    assert params["output_dim"] == 8 and params["n_way"] == 3
    fresh = clone(fitted_repr)
    assert not hasattr(fresh, "lam_")
    with pytest.raises(NotFittedError):
        fresh.transform(np.zeros((1, 10)))


def test_representation_input_requirements(pool):
    _, X, y = pool
    with pytest.raises(ValueError, match="at least"):
        HyperRepresentation(val_per_class=30).fit(X, y)
    with pytest.raises(ValueError, match="classes"):
        HyperRepresentation(n_way=5, val_per_class=5).fit(X[y < 8], y[y < 8])


def test_few_shot_on_learned_features(fitted_repr, pool):
    gen, _, _ = pool
    rng = np.random.default_rng(1)
    X_tr, X_te = gen.sample([16, 17, 18], 1, rng), gen.sample([16, 17, 18], 10, rng)
    clf = FewShotClassifier(representation=fitted_repr).fit(X_tr, ["a", "b", "c"])
    pred = clf.predict(X_te)
    assert set(pred) <= {"a", "b", "c"}
    assert clf.coef_.shape == (3, 8)
    np.testing.assert_allclose(clf.predict_proba(X_te).sum(axis=1), 1.0)


def test_few_shot_zero_horizon_predicts_first_class():
    X = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]])
    clf = FewShotClassifier(horizon=0).fit(X, [5, 3, 9])
    assert clf.predict(X).tolist() == [3, 3, 3]


def test_bilevel_logistic_tunes_step(pool):
    _, X, y = pool
    mask = y < 3
    clf = BilevelLogisticRegression(horizon=20, interval=5).fit(X[mask], y[mask])
    assert clf.step_size_ != pytest.approx(np.exp(-2.0))
    assert clf.score(X[mask], y[mask]) > 0.5
    full = BilevelLogisticRegression(horizon=10, method="full", outer_steps=3, batch_size=None).fit(X[mask], y[mask])
    assert np.isfinite(full.val_loss_)
