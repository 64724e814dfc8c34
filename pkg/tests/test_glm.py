import math

import numpy as np
import pytest

from recallcor.data_model import DegenerateData
from recallcor.glm import (
    LogisticFit,
    Separation,
    add_intercept,
    expit,
    fit_logistic,
    fitted_probs,
    predict_prob,
)


def test_intercept_only_equals_logit_of_mean():
    y = np.array([1, 0, 0, 0] * 25)
    fit = fit_logistic(np.ones((100, 1)), y)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(math.log(0.25 / 0.75), abs=1e-8)


def test_constant_response_rejected():
    with pytest.raises(DegenerateData):
        fit_logistic(np.ones((10, 1)), np.ones(10))


def test_saturated_2x2_slope_is_log_odds_ratio():
    # cells: (y=1,x=1)=30, (y=1,x=0)=20, (y=0,x=1)=20, (y=0,x=0)=30
    x = np.concatenate([np.ones(30), np.zeros(20), np.ones(20), np.zeros(30)])
    y = np.concatenate([np.ones(50), np.zeros(50)])
    fit = fit_logistic(add_intercept(x), y)
    assert fit.converged
    assert fit.coefficients[1] == pytest.approx(math.log(30 * 30 / (20 * 20)), abs=1e-7)


def test_underdetermined_design_rejected():
    with pytest.raises(ValueError):
        fit_logistic(np.ones((2, 3)), np.array([0.0, 1.0]))


def test_weights_match_replication(rng):
    x = rng.normal(size=(40, 2))
    y = (rng.random(40) < expit(x[:, 0])).astype(float)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    w = rng.integers(1, 4, 40).astype(float)
    X = add_intercept(x)
    weighted = fit_logistic(X, y, weights=w)
    replicated = fit_logistic(
        np.repeat(X, w.astype(int), axis=0), np.repeat(y, w.astype(int))
    )
    assert np.allclose(weighted.coefficients, replicated.coefficients, atol=1e-7)


def test_score_matches_finite_differences(rng):
    for _ in range(5):
        n, p = 60, 3
        x = rng.normal(size=(n, p))
        X = add_intercept(x)
        y = (rng.random(n) < expit(x[:, 0] - 0.3)).astype(float)
        if y.min() == y.max():
            continue
        beta = rng.normal(0, 0.5, p + 1)

        def loglik(b):
            eta = X @ b
            return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

        score = X.T @ (y - expit(X @ beta))
        h = 1e-6
        for j in range(p + 1):
            e = np.zeros(p + 1)
            e[j] = h
            fd = (loglik(beta + e) - loglik(beta - e)) / (2 * h)
            assert abs(fd - score[j]) <= 1e-5 * max(1.0, abs(score[j]))


def test_normal_equations_at_convergence(rng):
    x = rng.normal(size=(200, 3))
    y = (rng.random(200) < expit(0.4 * x[:, 0] - 0.2 * x[:, 1])).astype(float)
    X = add_intercept(x)
    fit = fit_logistic(X, y)
    assert fit.converged
    residual = X.T @ (y - fitted_probs(fit, X))
    assert np.max(np.abs(residual)) <= 1e-6


def test_separation_warned_not_raised():
    # small covariate scale forces the coefficient past the detection norm
    x = np.concatenate([-0.3 - np.arange(10) * 0.02, 0.3 + np.arange(10) * 0.02])
    y = np.concatenate([np.zeros(10), np.ones(10)])
    with pytest.warns(Separation):
        fit = fit_logistic(add_intercept(x), y)
    assert not fit.converged


def test_predict_prob_examples():
    fit = LogisticFit(np.zeros(3), True, 1, 0.0)
    assert predict_prob(fit, [1.0, -1.0]) == 0.5
    fit = LogisticFit(np.array([-1.0, 0.0]), True, 1, 0.0)
    assert predict_prob(fit, [0.0]) == pytest.approx(0.26894, abs=1e-5)
    # clipping keeps probabilities strictly inside (0, 1)
    fit = LogisticFit(np.array([1000.0]), True, 1, 0.0)
    assert 9e-14 < 1.0 - predict_prob(fit, []) < 1e-12
    with pytest.raises(ValueError):
        predict_prob(fit, [1.0])
