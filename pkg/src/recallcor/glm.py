"""Bernoulli-logit regression via iteratively reweighted least squares.

Used for the exposure/propensity model, the outcome models, the
misreporting-probability model of the ordering checks, and prognostic
scores.  No regularization, no other GLM families; coefficient standard
errors are intentionally absent (inference is bootstrap-based elsewhere).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data_model import DegenerateData, EstimationError

# Linear predictors are clipped at +/- this value inside expit: avoids overflow
# while leaving fitted probabilities untouched at realistic scales.
PREDICTOR_CLIP = 30.0


class SingularDesign(EstimationError):
    """The weighted normal equations are singular (collinear design)."""


class Separation(UserWarning):
    """Diverging coefficients: the classes are (quasi-)separable."""


@dataclass(frozen=True)
class LogisticFit:
    """Fitted coefficients (intercept first) with convergence metadata."""

    coefficients: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float


def expit(eta):
    """Inverse logit with the linear predictor clipped at +/-PREDICTOR_CLIP."""
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -PREDICTOR_CLIP, PREDICTOR_CLIP)))


def add_intercept(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if x.size else x.reshape(0, 1)
    return np.hstack([np.ones((x.shape[0], 1)), x])


def _log_likelihood(eta, y, w):
    # sum w * (y*eta - log(1 + exp(eta))), computed without overflow
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LogisticFit:
    """Maximize the (weighted) Bernoulli log-likelihood by IRLS.

    Parameters
    ----------
    X : (n, k) design matrix including the intercept column.
    y : (n,) binary response.
    weights : optional nonnegative case weights.
    tol : convergence tolerance on the score (gradient) sup-norm.
    max_iter : IRLS iteration cap.

    Newton steps are safeguarded by step-halving whenever the log-likelihood
    would decrease.  Separation (coefficient sup-norm exceeding
    PREDICTOR_CLIP) is reported via a Separation warning and the fit is
    returned with ``converged=False``; callers that require a usable score
    model must refuse such fits.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    if n < k:
        raise ValueError(f"need at least {k} rows to fit {k} coefficients, got {n}")
    if y.min() == y.max():
        raise DegenerateData("response is constant; logistic fit is undefined")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any():
        raise ValueError("weights must be a nonnegative vector of length n")

    beta = np.zeros(k)
    eta = X @ beta
    ll = _log_likelihood(eta, y, w)
    score = X.T @ (w * (y - expit(eta)))
    iterations = 0
    for iterations in range(1, max_iter + 1):
        p = expit(eta)
        wt = w * p * (1.0 - p)
        hessian = X.T @ (X * wt[:, None])
        try:
            step = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError:
            raise SingularDesign("singular weighted normal equations") from None

        # step-halving: accept the first candidate that does not decrease ll
        accepted = False
        for _ in range(30):
            candidate = beta + step
            eta_c = X @ candidate
            ll_c = _log_likelihood(eta_c, y, w)
            if ll_c >= ll - 1e-12:
                beta, eta, ll = candidate, eta_c, ll_c
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            break

        if np.max(np.abs(beta)) > PREDICTOR_CLIP:
            warnings.warn(
                "separation detected: coefficients diverging", Separation, stacklevel=2
            )
            score = X.T @ (w * (y - expit(eta)))
            return LogisticFit(beta, False, iterations, float(np.max(np.abs(score))))

        score = X.T @ (w * (y - expit(eta)))
        if np.max(np.abs(score)) <= tol:
            return LogisticFit(beta, True, iterations, float(np.max(np.abs(score))))

    return LogisticFit(beta, False, iterations, float(np.max(np.abs(score))))


def predict_prob(fit: LogisticFit, x) -> float:
    """Fitted probability at covariate vector ``x`` (intercept prepended)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != fit.coefficients.size - 1:
        raise ValueError(
            f"expected {fit.coefficients.size - 1} covariates, got {x.size}"
        )
    eta = fit.coefficients[0] + float(x @ fit.coefficients[1:])
    return float(expit(eta))


def fitted_probs(fit: LogisticFit, X: np.ndarray) -> np.ndarray:
    """Vectorized fitted probabilities for a full design matrix."""
    return expit(np.asarray(X) @ fit.coefficients)
