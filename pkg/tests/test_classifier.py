import numpy as np
import pytest
from scipy.optimize import minimize

from retrain_rl import classifier as clf
from retrain_rl.drift_env import Batch, ConfigError, DgpParams, derive_rng, generate_batch


def test_metrics_by_hand():
    p = np.array([0.9, 0.8, 0.3, 0.2, 0.6])
    y = np.array([1, 0, 1, 0, 1])
    m = clf.metrics_from_proba(p, y)
    assert m.accuracy == pytest.approx(3 / 5)
    assert m.precision == pytest.approx(2 / 3)
    assert m.recall == pytest.approx(2 / 3)
    ce = -np.mean(np.log([0.9, 0.2, 0.3, 0.8, 0.6]))
    assert m.cross_entropy == pytest.approx(ce)


def test_precision_zero_over_zero_and_clamped_cross_entropy():
    m = clf.metrics_from_proba(np.array([0.0, 0.1]), np.array([1, 0]))
    assert m.precision == 0.0 and m.recall == 0.0
    assert m.cross_entropy == pytest.approx(-np.log(1e-12) / 2 - np.log(0.9) / 2)


def test_errors_match_accuracy():
    theta = DgpParams(0.2, [1.0, -0.5])
    b = generate_batch(theta, 500, derive_rng(1))
    model = clf.fit(b)
    assert 1 - clf.errors(model, b).mean() == pytest.approx(clf.evaluate(model, b).accuracy)


def test_irls_matches_independent_optimizer():
    theta = DgpParams(-0.3, [0.8, -1.2, 0.4])
    b = generate_batch(theta, 3000, derive_rng(2))
    model = clf.fit(b)
    Z = np.hstack([np.ones((len(b), 1)), b.covariates])
    y = b.labels.astype(float)

    def nll(beta):
        z = Z @ beta
        return np.sum(np.logaddexp(0, z) - y * z) + 0.5e-8 * beta @ beta

    ref = minimize(nll, np.zeros(4), method="BFGS", options={"gtol": 1e-10}).x
    assert np.max(np.abs(model.coefficients() - ref)) < 1e-5
    assert model.converged


def test_rank_deficient_batch_rejected():
    X = np.ones((20, 2))
    with pytest.raises(clf.DegenerateBatchError):
        clf.fit(Batch(X, np.r_[np.zeros(10), np.ones(10)]))


def test_separable_batch_stays_finite():
    X = np.linspace(-1, 1, 40)[:, None]
    b = Batch(X, (X[:, 0] > 0).astype(int))
    model = clf.fit(b)
    assert np.all(np.isfinite(model.coefficients()))
    assert clf.evaluate(model, b).accuracy == 1.0


def test_threshold_validation():
    b = generate_batch(DgpParams(0.0, [1.0]), 50, derive_rng(3))
    model = clf.fit(b)
    with pytest.raises(ConfigError):
        clf.evaluate(model, b, threshold=1.0)
    with pytest.raises(ConfigError):
        clf.predict_proba(model, np.zeros((3, 2)))
